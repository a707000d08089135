"""Grids, slowness/velocity models, the rank-2 lifted model and grid files.

Conventions used throughout the package:

* distances in km, velocities in km/s, squared slowness in s^2/km^2,
  frequencies in Hz with ``omega = 2*pi*f``;
* a model on a ``nx`` x ``nz`` grid is stored as a flat vector of length
  ``nx*nz``; node ``(ix, iz)`` lives at index ``iz*nx + ix`` (x fastest).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

GRID_MAGIC = "LRWI-GRID v1"


@dataclass(frozen=True)
class Grid2D:
    nx: int
    nz: int
    dx: float
    dz: float

    def __post_init__(self):
        if self.nx < 3 or self.nz < 3:
            raise ShapeError(f"grid needs at least 3x3 nodes, got {self.nx}x{self.nz}")
        if not (self.dx > 0 and self.dz > 0):
            raise DomainError(f"grid spacing must be positive, got dx={self.dx} dz={self.dz}")

    @property
    def n(self) -> int:
        return self.nx * self.nz

    @property
    def shape(self):
        """Array shape ``(nz, nx)`` of a model reshaped row by row."""
        return (self.nz, self.nx)

    @property
    def x(self):
        return np.arange(self.nx) * self.dx

    @property
    def z(self):
        return np.arange(self.nz) * self.dz

    @property
    def extent(self):
        """``(x_max, z_max)`` in km."""
        return ((self.nx - 1) * self.dx, (self.nz - 1) * self.dz)

    def index(self, ix: int, iz: int) -> int:
        return iz * self.nx + ix

    def nearest_node(self, x: float, z: float):
        """Return ``(index, snap_distance)`` of the node closest to ``(x, z)``."""
        xmax, zmax = self.extent
        tol = 1e-9 * max(xmax, zmax, 1.0)
        if not (-tol <= x <= xmax + tol and -tol <= z <= zmax + tol):
            raise DomainError(f"position ({x}, {z}) lies outside the grid extent ({xmax}, {zmax})")
        ix = min(max(int(round(x / self.dx)), 0), self.nx - 1)
        iz = min(max(int(round(z / self.dz)), 0), self.nz - 1)
        dist = math.hypot(x - ix * self.dx, z - iz * self.dz)
        return self.index(ix, iz), dist

    def reshape(self, values):
        return np.asarray(values).reshape(self.shape)


def _checked_values(grid, values, what, positive=True):
    arr = np.array(values, dtype=float).ravel()
    if arr.size != grid.n:
        raise ShapeError(f"{what} has {arr.size} entries, grid needs {grid.n}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{what} contains non-finite entries")
    if positive and not np.all(arr > 0):
        raise DomainError(f"{what} must be strictly positive")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SlownessModel:
    """Squared slowness ``m = 1/v^2`` on a grid."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _checked_values(self.grid, self.values, "slowness model"))


@dataclass(frozen=True, eq=False)
class VelocityModel:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _checked_values(self.grid, self.values, "velocity model"))


@dataclass(frozen=True, eq=False)
class Rank2Model:
    """Lifted model pair ``(m1, m2)`` with mixing angle ``theta``.

    The combined model is ``sin(theta)*m1 + cos(theta)*m2``. Components are
    only required to be finite; they may change sign during an inversion.
    """

    grid: Grid2D
    m1: np.ndarray
    m2: np.ndarray
    theta: float = field(default=math.pi / 4)

    def __post_init__(self):
        object.__setattr__(self, "m1", _checked_values(self.grid, self.m1, "m1", positive=False))
        object.__setattr__(self, "m2", _checked_values(self.grid, self.m2, "m2", positive=False))
        if not math.isfinite(self.theta):
            raise DomainError("theta must be finite")
        object.__setattr__(self, "theta", float(self.theta))

    @property
    def alpha1(self) -> float:
        return math.sin(self.theta)

    @property
    def alpha2(self) -> float:
        return math.cos(self.theta)

    def stacked(self):
        return np.concatenate([self.m1, self.m2])

    def with_components(self, stacked, theta=None):
        n = self.grid.n
        return Rank2Model(self.grid, stacked[:n], stacked[n:],
                          self.theta if theta is None else theta)


def velocity_to_slowness(v: VelocityModel) -> SlownessModel:
    return SlownessModel(v.grid, 1.0 / v.values**2)


def slowness_to_velocity(m: SlownessModel) -> VelocityModel:
    return VelocityModel(m.grid, 1.0 / np.sqrt(m.values))


def combine(r: Rank2Model) -> SlownessModel:
    return SlownessModel(r.grid, math.sin(r.theta) * r.m1 + math.cos(r.theta) * r.m2)


def split(m: SlownessModel, theta: float = math.pi / 4) -> Rank2Model:
    return Rank2Model(m.grid, math.sin(theta) * m.values, math.cos(theta) * m.values, theta)


def relative_model_error(m_true, m_final) -> float:
    """``||m_true - m_final|| / ||m_true||`` in the Euclidean norm."""
    if m_true.grid != m_final.grid:
        raise ShapeError("models live on different grids")
    ref = np.linalg.norm(m_true.values)
    if ref == 0:
        raise DomainError("reference model has zero norm")
    return float(np.linalg.norm(m_true.values - m_final.values) / ref)


# --------------------------------------------------------------------------
# synthetic models

def _layered(grid, layers):
    # layers: sequence of (z_top, velocity), first one covers the surface
    if not layers:
        raise ConfigError("layered model needs at least one layer")
    tops = [float(t) for t, _ in layers]
    if tops != sorted(tops):
        raise ConfigError("layer tops must be ascending")
    vel = np.empty(grid.shape)
    z = grid.z
    for k, (top, v) in enumerate(layers):
        vel[z >= top - 1e-12, :] = v
    vel[z < tops[0] - 1e-12, :] = layers[0][1]
    return vel


def make_synthetic(kind: str, grid: Grid2D, params=None, seed=None) -> VelocityModel:
    """Build a deterministic synthetic velocity model.

    kinds
        ``linear-gradient``: ``v_top`` at the first row to ``v_bottom`` at the last.
        ``layered``: ``layers`` = [(z_top, v), ...] piecewise-constant in depth.
        ``wedge``: layered background; nodes on or below the dipping line
        ``z = z0 + slope*x`` and above ``z_base`` take ``v_wedge``.

    ``perturbation`` (relative std, default 0) adds seeded Gaussian noise.
    """
    p = dict(params or {})
    if kind == "linear-gradient":
        v_top = float(p.pop("v_top", 1.5))
        v_bottom = float(p.pop("v_bottom", 4.5))
        col = v_top + (v_bottom - v_top) * np.arange(grid.nz) / (grid.nz - 1)
        vel = np.repeat(col[:, None], grid.nx, axis=1)
    elif kind == "layered":
        vel = _layered(grid, p.pop("layers", [(0.0, 2.0)]))
    elif kind == "wedge":
        vel = _layered(grid, p.pop("layers", [(0.0, 2.0)]))
        z0 = float(p.pop("z0"))
        slope = float(p.pop("slope"))
        z_base = float(p.pop("z_base", np.inf))
        v_wedge = float(p.pop("v_wedge"))
        X, Z = np.meshgrid(grid.x, grid.z)
        mask = (Z >= z0 + slope * X - 1e-12) & (Z < z_base - 1e-12)
        vel[mask] = v_wedge
    else:
        raise ConfigError(f"unknown synthetic model kind {kind!r}")
    pert = float(p.pop("perturbation", 0.0))
    if p:
        raise ConfigError(f"unused parameters for {kind!r}: {sorted(p)}")
    if pert:
        rng = np.random.default_rng(seed)
        vel = vel * (1.0 + pert * rng.standard_normal(vel.shape))
    return VelocityModel(grid, vel.ravel())


# --------------------------------------------------------------------------
# LRWI-GRID v1 files

def write_grid_file(path, model, unit=None):
    """Write a velocity or slowness model as an ``LRWI-GRID v1`` text file."""
    if unit is None:
        unit = "velocity" if isinstance(model, VelocityModel) else "slowness2"
    g = model.grid
    lines = [f"{GRID_MAGIC} nx={g.nx} nz={g.nz} dx={g.dx!r} dz={g.dz!r} unit={unit}"]
    for row in g.reshape(model.values):
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid_file(path):
    """Parse an ``LRWI-GRID v1`` file.

    Returns a :class:`VelocityModel` or :class:`SlownessModel` according to
    the ``unit`` field.
    """
    text = Path(path).read_text().splitlines()
    text = [ln for ln in text if ln.strip()]
    if not text or not text[0].startswith(GRID_MAGIC):
        raise ConfigError(f"{path}: missing '{GRID_MAGIC}' header")
    fields = {}
    for tok in text[0][len(GRID_MAGIC):].split():
        if "=" not in tok:
            raise ConfigError(f"{path}:1: malformed header token {tok!r}")
        k, v = tok.split("=", 1)
        fields[k] = v
    try:
        grid = Grid2D(int(fields["nx"]), int(fields["nz"]), float(fields["dx"]), float(fields["dz"]))
        unit = fields["unit"]
    except KeyError as exc:
        raise ConfigError(f"{path}:1: header lacks {exc}") from None
    if unit not in ("velocity", "slowness2"):
        raise ConfigError(f"{path}:1: unknown unit {unit!r}")
    rows = text[1:]
    if len(rows) != grid.nz:
        raise ConfigError(f"{path}: expected {grid.nz} rows, found {len(rows)}")
    values = []
    for lineno, row in enumerate(rows, start=2):
        vals = row.split()
        if len(vals) != grid.nx:
            raise ConfigError(f"{path}:{lineno}: expected {grid.nx} values, found {len(vals)}")
        values.extend(float(v) for v in vals)
    cls = VelocityModel if unit == "velocity" else SlownessModel
    return cls(grid, np.array(values))


def load_slowness(path) -> SlownessModel:
    model = read_grid_file(path)
    if isinstance(model, VelocityModel):
        return velocity_to_slowness(model)
    return model
