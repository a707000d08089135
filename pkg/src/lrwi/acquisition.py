"""Acquisition geometry, receiver projection, source spectra and forward modeling."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DomainError, ShapeError, SingularityError
from .grid import Grid2D, SlownessModel
from .helmholtz import assemble
from .linalg import factorize

DATA_MAGIC = "LRWI-DATA v1"


@dataclass(frozen=True, eq=False)
class Geometry:
    """Source and receiver positions in km, snapped to the nearest node."""

    grid: Grid2D
    source_positions: tuple
    receiver_positions: tuple
    source_nodes: np.ndarray = field(init=False)
    receiver_nodes: np.ndarray = field(init=False)
    snap_distances: np.ndarray = field(init=False)

    def __post_init__(self):
        srcs = tuple((float(x), float(z)) for x, z in self.source_positions)
        recs = tuple((float(x), float(z)) for x, z in self.receiver_positions)
        if not srcs or not recs:
            raise ConfigError("geometry needs at least one source and one receiver")
        snapped = [self.grid.nearest_node(x, z) for x, z in srcs + recs]
        nodes = np.array([k for k, _ in snapped], dtype=int)
        object.__setattr__(self, "source_positions", srcs)
        object.__setattr__(self, "receiver_positions", recs)
        object.__setattr__(self, "source_nodes", nodes[:len(srcs)])
        object.__setattr__(self, "receiver_nodes", nodes[len(srcs):])
        object.__setattr__(self, "snap_distances", np.array([d for _, d in snapped]))

    @property
    def ns(self):
        return len(self.source_positions)

    @property
    def nr(self):
        return len(self.receiver_positions)

    @classmethod
    def line(cls, grid, n_sources, n_receivers, depth, receiver_depth=None, margin=0.0):
        """Evenly spaced sources and receivers along horizontal lines."""
        xmax, _ = grid.extent
        xs = np.linspace(margin, xmax - margin, n_sources) if n_sources > 1 else [xmax / 2]
        xr = np.linspace(margin, xmax - margin, n_receivers) if n_receivers > 1 else [xmax / 2]
        zr = depth if receiver_depth is None else receiver_depth
        return cls(grid, [(x, depth) for x in xs], [(x, zr) for x in xr])


@dataclass(frozen=True, eq=False)
class ProjectionOperator:
    """0/1 selection ``P`` (n_r x n_g) of receiver nodes."""

    matrix: sp.csr_matrix

    @classmethod
    def from_nodes(cls, nodes, n):
        nodes = np.asarray(nodes, dtype=int)
        P = sp.csr_matrix((np.ones(nodes.size), (np.arange(nodes.size), nodes)),
                          shape=(nodes.size, n))
        return cls(P)

    @classmethod
    def from_geometry(cls, geom: Geometry):
        return cls.from_nodes(geom.receiver_nodes, geom.grid.n)

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, u):
        return self.matrix @ u

    @property
    def H(self):
        return self.matrix.T.tocsr()


def ricker_weight(f, f0):
    """Ricker amplitude spectrum ``(2/sqrt(pi)) f^2/f0^3 exp(-f^2/f0^2)``."""
    f = np.asarray(f, dtype=float)
    if np.any(f <= 0) or f0 <= 0:
        raise DomainError("Ricker spectrum needs positive frequencies")
    out = 2.0 / math.sqrt(math.pi) * f**2 / f0**3 * np.exp(-(f**2) / f0**2)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SourceSpectrum:
    center_frequency: float = 15.0
    amplitude: complex = 1.0

    def __post_init__(self):
        if not self.center_frequency > 0:
            raise DomainError("center frequency must be positive")
        if not np.isfinite(self.amplitude):
            raise DomainError("source amplitude must be finite")
        if self.amplitude == 0:
            warnings.warn("zero source amplitude: all modeled data will vanish",
                          RuntimeWarning, stacklevel=3)

    def weight(self, f):
        return self.amplitude * ricker_weight(f, self.center_frequency)


@dataclass(frozen=True, eq=False)
class ObservedData:
    """Complex data indexed ``[source, receiver, frequency]``."""

    values: np.ndarray
    frequencies: tuple

    def __post_init__(self):
        vals = np.array(self.values, dtype=complex)
        freqs = tuple(float(f) for f in self.frequencies)
        if vals.ndim != 3 or vals.shape[2] != len(freqs):
            raise ShapeError(f"data shape {vals.shape} does not match {len(freqs)} frequencies")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "frequencies", freqs)

    @property
    def ns(self):
        return self.values.shape[0]

    @property
    def nr(self):
        return self.values.shape[1]

    def at(self, f):
        """Data block ``(ns, nr)`` at frequency ``f``."""
        try:
            j = self.frequencies.index(float(f))
        except ValueError:
            raise ConfigError(f"no data recorded at {f} Hz") from None
        return self.values[:, :, j]

    def select(self, freqs):
        return ObservedData(np.stack([self.at(f) for f in freqs], axis=2), tuple(freqs))


def source_matrix(geom: Geometry, weight) -> np.ndarray:
    """Right-hand sides as columns ``(n_g, n_s)`` for a scalar source weight."""
    g = geom.grid
    Q = np.zeros((g.n, geom.ns), dtype=complex)
    Q[geom.source_nodes, np.arange(geom.ns)] = weight / (g.dx * g.dz)
    return Q


def check_geometry(geom: Geometry, data: ObservedData):
    if (data.ns, data.nr) != (geom.ns, geom.nr):
        raise ShapeError(f"data has {data.ns} sources x {data.nr} receivers, "
                         f"geometry has {geom.ns} x {geom.nr}")


def forward_model(m: SlownessModel, geom: Geometry, freqs, spectrum: SourceSpectrum,
                  bc_slowness=None) -> ObservedData:
    """Model ``d = P A(m)^-1 q`` for every source and frequency.

    One factorization per frequency serves all sources.
    """
    if m.grid != geom.grid:
        raise ShapeError("model and geometry grids differ")
    P = ProjectionOperator.from_geometry(geom)
    out = np.zeros((geom.ns, geom.nr, len(freqs)), dtype=complex)
    for j, f in enumerate(freqs):
        op = assemble(m, f, bc_slowness)
        try:
            fact = factorize(op.matrix)
        except SingularityError as exc:
            exc.context.update(frequency=f)
            raise
        U = fact.solve(source_matrix(geom, spectrum.weight(f)))
        out[:, :, j] = (P @ U).T
    return ObservedData(out, tuple(freqs))


def add_noise(data: ObservedData, std: float, seed) -> ObservedData:
    """Additive circular complex Gaussian noise with per-entry std ``std``."""
    rng = np.random.default_rng(seed)
    shape = data.values.shape
    noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * std / math.sqrt(2)
    return ObservedData(data.values + noise, data.frequencies)


# --------------------------------------------------------------------------
# LRWI-DATA v1 files

def write_data_file(path, data: ObservedData):
    ns, nr, nf = data.values.shape
    lines = [f"{DATA_MAGIC} ns={ns} nr={nr} nf={nf}",
             " ".join(repr(f) for f in data.frequencies)]
    for s in range(ns):
        for r in range(nr):
            for k in range(nf):
                v = data.values[s, r, k]
                lines.append(f"{s} {r} {k} {float(v.real)!r} {float(v.imag)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_data_file(path) -> ObservedData:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(DATA_MAGIC):
        raise ConfigError(f"{path}: missing '{DATA_MAGIC}' header")
    try:
        hdr = dict(tok.split("=", 1) for tok in lines[0][len(DATA_MAGIC):].split())
        ns, nr, nf = int(hdr["ns"]), int(hdr["nr"]), int(hdr["nf"])
    except (KeyError, ValueError):
        raise ConfigError(f"{path}:1: malformed header") from None
    if len(lines) < 2:
        raise ConfigError(f"{path}: missing frequency line")
    freqs = [float(v) for v in lines[1].split()]
    if len(freqs) != nf:
        raise ConfigError(f"{path}:2: expected {nf} frequencies, found {len(freqs)}")
    body = lines[2:]
    if len(body) != ns * nr * nf:
        raise ConfigError(f"{path}: expected {ns * nr * nf} data lines, found {len(body)}")
    vals = np.zeros((ns, nr, nf), dtype=complex)
    expect = ((s, r, k) for s in range(ns) for r in range(nr) for k in range(nf))
    for lineno, (ln, idx) in enumerate(zip(body, expect), start=3):
        parts = ln.split()
        if len(parts) != 5 or tuple(int(p) for p in parts[:3]) != idx:
            raise ConfigError(f"{path}:{lineno}: expected entry {idx} as 's r f re im'")
        vals[idx] = complex(float(parts[3]), float(parts[4]))
    return ObservedData(vals, tuple(freqs))
