"""Experiment protocols driven by a :class:`~lrwi.config.Config`.

Each protocol returns plain rows (lists of tuples) plus whatever objects the
CLI needs to write files; nothing here touches the output directory.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from importlib import resources
from typing import Optional

import numpy as np

from .acquisition import (Geometry, ObservedData, SourceSpectrum, add_noise, forward_model,
                          read_data_file)
from .config import Config
from .errors import ConfigError, LrwiError, SingularityError, SizeError
from .grid import (Grid2D, Rank2Model, SlownessModel, VelocityModel, make_synthetic,
                   read_grid_file, relative_model_error, split, velocity_to_slowness)
from .linalg import condition_estimate
from .objectives import (Problem, build_augmented, fwi_value_grad, lrwi_value_grad,
                         wri_value_grad)
from .optimize import RunConfig, run_continuation
from .penalty import NEAR_SINGULAR_BETA2, estimate_mu1, estimate_mu2, make_penalties

MAX_DENSE_NODES = 2500

GRADCHECK_COLUMNS = ("method", "beta1", "beta2", "h", "component", "analytic", "fd", "rel_err")
CONDSTUDY_COLUMNS = ("beta1", "beta2", "cond", "cond_ref")
BETASWEEP_COLUMNS = ("method", "beta1", "beta2", "rel_model_error", "reason")
FREQSWEEP_COLUMNS = ("method", "f_start", "rel_model_error", "reason")


def benchmark_path():
    """Packaged two-layer-plus-wedge velocity model on an 80 x 40 grid."""
    return resources.files("lrwi") / "data" / "benchmark_true.grid"


# --------------------------------------------------------------------------
# setup

@dataclass
class Setup:
    grid: Grid2D
    m_true: Optional[SlownessModel]
    m_init: Optional[SlownessModel]
    geometry: Geometry
    spectrum: SourceSpectrum
    bc_slowness: np.ndarray
    seed: int

    def problem(self, data: ObservedData) -> Problem:
        return Problem(self.geometry, data, self.spectrum, self.bc_slowness)


def _grid_from_config(cfg: Config) -> Optional[Grid2D]:
    keys = ("nx", "nz", "dx", "dz")
    if not any(cfg.is_set("grid", k) for k in keys):
        return None
    nx, nz = cfg.require("grid", "nx"), cfg.require("grid", "nz")
    return Grid2D(nx, nz, cfg.require("grid", "dx"), cfg.require("grid", "dz"))


def _to_slowness(model):
    return velocity_to_slowness(model) if isinstance(model, VelocityModel) else model


def _model_from_section(cfg: Config, section: str, grid: Optional[Grid2D], seed):
    kind = cfg.get(section, "kind")
    if kind is None:
        return None
    params = {k: v for k, v in cfg.section(section).items() if k not in ("kind", "file")}
    if kind in ("file", "benchmark"):
        if params:
            raise ConfigError(f"{section}: kind {kind!r} takes no parameters, got {sorted(params)}")
        path = benchmark_path() if kind == "benchmark" else \
            cfg.resolve_path(cfg.require(section, "file"))
        with resources.as_file(path) as p:
            model = _to_slowness(read_grid_file(p))
        if grid is not None and model.grid != grid:
            raise ConfigError(f"{section}: file grid {model.grid} differs from grid.* keys")
        return model
    if grid is None:
        raise ConfigError(f"{section}: synthetic models need grid.nx, grid.nz, grid.dx, grid.dz")
    if cfg.is_set(section, "file"):
        raise ConfigError(f"{section}.file is only valid with kind = file")
    if "layers" in params:
        params["layers"] = list(params["layers"])
    return _to_slowness(make_synthetic(kind, grid, params, seed))


def build_setup(cfg: Config, seed: Optional[int] = None, need_initial=False) -> Setup:
    """Grid, models, geometry, spectrum and boundary reference from ``cfg``.

    The radiating boundary uses ``boundary.velocity`` when set, otherwise
    the initial model (or the true model when there is none). Observed
    data and every inversion share that reference.
    """
    seed = cfg.get("run", "seed") if seed is None else seed
    grid = _grid_from_config(cfg)
    m_true = _model_from_section(cfg, "model", grid, seed)
    grid = grid or (m_true.grid if m_true is not None else None)
    m_init = _model_from_section(cfg, "initial", grid, seed + 1)
    grid = grid or (m_init.grid if m_init is not None else None)
    if grid is None:
        raise ConfigError("no grid: set grid.* keys or a model from a file")
    if m_true is not None and m_init is not None and m_true.grid != m_init.grid:
        raise ConfigError("true and initial models are on different grids")
    if need_initial and m_init is None:
        raise ConfigError("missing required key initial.kind")

    n_s = cfg.require("acquisition", "n_sources")
    n_r = cfg.require("acquisition", "n_receivers")
    depth = cfg.require("acquisition", "source_depth")
    geom = Geometry.line(grid, n_s, n_r, depth, cfg.get("acquisition", "receiver_depth"),
                         cfg.get("acquisition", "margin"))
    spectrum = SourceSpectrum(cfg.get("source", "center_frequency"),
                              cfg.get("source", "amplitude"))
    v_bc = cfg.get("boundary", "velocity")
    if v_bc is not None:
        if not v_bc > 0:
            raise ConfigError("boundary.velocity must be positive")
        bc = np.full(grid.n, 1.0 / v_bc**2)
    elif m_init is not None:
        bc = m_init.values
    elif m_true is not None:
        bc = m_true.values
    else:
        raise ConfigError("set boundary.velocity or provide a model")
    return Setup(grid, m_true, m_init, geom, spectrum, np.array(bc), seed)


def inversion_bands(cfg: Config):
    return [tuple(b) for b in cfg.require("inversion", "bands")]


def all_frequencies(bands):
    return tuple(sorted({f for b in bands for f in b}))


def observed_data(cfg: Config, setup: Setup, freqs) -> ObservedData:
    """Data from ``data.file`` or modeled from the true model (plus seeded noise)."""
    if cfg.get("data", "file") is not None:
        data = read_data_file(cfg.resolve_path(cfg.get("data", "file")))
        return data.select(freqs)
    if setup.m_true is None:
        raise ConfigError("need data.file or a true model (model.kind) to model data")
    data = forward_model(setup.m_true, setup.geometry, freqs, setup.spectrum, setup.bc_slowness)
    std = cfg.get("data", "noise_std")
    if std:
        data = add_noise(data, std, setup.seed + 2)
    return data


def forward_frequencies(cfg: Config):
    freqs = cfg.get("data", "frequencies")
    if freqs is None:
        if cfg.get("inversion", "bands") is None:
            raise ConfigError("set data.frequencies or inversion.bands")
        freqs = all_frequencies(inversion_bands(cfg))
    return tuple(freqs)


def run_config(cfg: Config, setup: Setup, method=None, bands=None, beta1=None, beta2=None):
    bounds = (cfg.get("inversion", "v_min"), cfg.get("inversion", "v_max")) \
        if cfg.get("inversion", "bounds") else None
    g1 = cfg.get("penalty", "growth1")
    g2 = cfg.get("penalty", "growth2")
    pens = make_penalties(cfg.get("penalty", "beta1") if beta1 is None else beta1,
                          cfg.get("penalty", "beta2") if beta2 is None else beta2,
                          growth1=g1[0] if len(g1) == 1 else tuple(g1),
                          growth2=g2[0] if len(g2) == 1 else tuple(g2))
    return RunConfig(method or cfg.get("inversion", "method"),
                     list(bands or inversion_bands(cfg)),
                     cfg.get("inversion", "iters_per_band"),
                     pens,
                     theta0=cfg.get("inversion", "theta0"),
                     bounds=bounds,
                     lrwi_all_bands=cfg.get("inversion", "lrwi_all_bands"),
                     freeze_lambda=cfg.get("inversion", "freeze_lambda"),
                     memory=cfg.get("inversion", "memory"),
                     init_step=cfg.get("inversion", "init_step"),
                     m_true=setup.m_true)


def invert(cfg: Config, seed=None):
    """One continuation run. Returns ``(setup, final_model, report)``."""
    setup = build_setup(cfg, seed, need_initial=True)
    bands = inversion_bands(cfg)
    problem = setup.problem(observed_data(cfg, setup, all_frequencies(bands)))
    rc = run_config(cfg, setup)
    model, report = run_continuation(rc, problem, setup.m_init)
    return setup, model, report


# --------------------------------------------------------------------------
# gradient check

def _check_size(grid):
    if grid.n > MAX_DENSE_NODES:
        raise SizeError(f"grid has {grid.n} nodes; this protocol is limited to {MAX_DENSE_NODES}")


def _rel_errors(analytic, fd):
    analytic = np.atleast_1d(np.asarray(analytic, dtype=float))
    fd = np.atleast_1d(np.asarray(fd, dtype=float))
    scale = max(np.max(np.abs(fd)), np.max(np.abs(analytic)))
    diff = np.abs(analytic - fd)
    return diff / scale if scale > 0 else diff


def central_differences(fun, x, h):
    """Componentwise central differences of a scalar function."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return out


def gradcheck(cfg: Config, seed=None):
    """Analytic versus central-difference gradients for every method.

    Relative error per component is ``|analytic - fd| / max(|fd|_inf, |analytic|_inf)``
    over that gradient. Returns ``(rows, worst)`` where ``worst`` maps each
    ``(method, beta1, beta2)`` group to its smallest-over-``h`` maximum error.
    """
    setup = build_setup(cfg, seed)
    grid = setup.grid
    _check_size(grid)
    m0 = setup.m_init if setup.m_init is not None else setup.m_true
    if m0 is None:
        raise ConfigError("gradcheck needs an initial or true model")
    f = cfg.get("gradcheck", "frequency")
    if f is None:
        f = forward_frequencies(cfg)[0]
    pb = setup.problem(observed_data(cfg, setup, (f,)))
    hs = cfg.get("gradcheck", "h")
    rows = []
    worst = {}

    def record(method, b1, b2, h, comps, analytic, fd):
        errs = _rel_errors(analytic, fd)
        for c, a, d, e in zip(comps, np.atleast_1d(analytic), np.atleast_1d(fd), errs):
            rows.append((method, b1, b2, h, c, float(a), float(d), float(e)))
        key = (method, b1, b2)
        worst[key] = min(worst.get(key, math.inf), float(np.max(errs)))

    comps = [str(i) for i in range(grid.n)]
    _, g = fwi_value_grad(m0, pb)
    for h in hs:
        fd = central_differences(lambda v: fwi_value_grad(SlownessModel(grid, v), pb)[0].total,
                                 m0.values, h)
        record("fwi", "", "", h, comps, g, fd)

    mu1 = estimate_mu1(m0, f, pb.P, pb.bc_slowness)
    theta = cfg.get("gradcheck", "theta")
    r = split(m0, theta)
    rng = np.random.default_rng(setup.seed)
    pert = cfg.get("gradcheck", "split_perturbation")
    # leave the rank-1 manifold so the angle gradient is generic
    r2 = Rank2Model(grid, r.m1 * (1 + pert * rng.uniform(-1, 1, grid.n)), r.m2, theta)
    n = grid.n
    comps2 = [f"m1[{i}]" for i in range(n)] + [f"m2[{i}]" for i in range(n)]
    for b1 in cfg.get("gradcheck", "beta1"):
        lam = b1 * mu1
        _, g = wri_value_grad(m0, lam, pb)
        for h in hs:
            fd = central_differences(
                lambda v: wri_value_grad(SlownessModel(grid, v), lam, pb)[0].total, m0.values, h)
            record("wri", b1, "", h, comps, g, fd)
        for b2 in cfg.get("gradcheck", "beta2"):
            gamma = b2 * estimate_mu2(r2, lam, f, pb.P, pb.laplacian(f))
            ev = lrwi_value_grad(r2, lam, gamma, pb)

            def fm(x):
                return lrwi_value_grad(Rank2Model(grid, x[:n], x[n:], theta), lam, gamma, pb,
                                       need_grad=False).report.total

            def ft(t):
                return lrwi_value_grad(Rank2Model(grid, r2.m1, r2.m2, t), lam, gamma, pb,
                                       need_grad=False).report.total

            for h in hs:
                record("lrwi-m", b1, b2, h, comps2, ev.grad_m,
                       central_differences(fm, r2.stacked(), h))
                record("lrwi-theta", b1, b2, h, ["theta"], ev.grad_theta,
                       central_differences(lambda t: ft(t[0]), [theta], h))
    return rows, worst


# --------------------------------------------------------------------------
# conditioning study

def condstudy(cfg: Config, seed=None):
    """``cond(S~^H S~)`` over the configured (beta1, beta2) grid at the initial model.

    Rows ``(beta1, beta2, cond, cond_ref)`` with ``cond_ref = cond(A^H A)``;
    a singular matrix gives ``inf``.
    """
    setup = build_setup(cfg, seed)
    _check_size(setup.grid)
    m0 = setup.m_init if setup.m_init is not None else setup.m_true
    if m0 is None:
        raise ConfigError("condstudy needs an initial or true model")
    f = cfg.get("condstudy", "frequency")
    if f is None:
        f = forward_frequencies(cfg)[0]
    max_iter, tol = cfg.get("condstudy", "max_iter"), cfg.get("condstudy", "tol")
    from .acquisition import ProjectionOperator
    from .helmholtz import assemble, laplacian

    P = ProjectionOperator.from_geometry(setup.geometry).matrix
    A = assemble(m0, f, setup.bc_slowness).matrix
    cond_ref = _cond_or_inf((A.conj().T @ A).tocsc(), max_iter, tol)
    mu1 = estimate_mu1(m0, f, P, setup.bc_slowness)
    omega = 2 * math.pi * f
    L = laplacian(setup.grid, omega, setup.bc_slowness)
    r2 = split(m0, cfg.get("inversion", "theta0"))
    rows = []
    for b1 in cfg.get("condstudy", "beta1"):
        lam = b1 * mu1
        mu2 = estimate_mu2(r2, lam, f, P, L)
        for b2 in cfg.get("condstudy", "beta2"):
            S = build_augmented(r2, lam, b2 * mu2, omega, P, L)
            rows.append((b1, b2, _cond_or_inf((S.conj().T @ S).tocsc(), max_iter, tol), cond_ref))
    return rows


def _cond_or_inf(M, max_iter, tol):
    try:
        return float(condition_estimate(M, max_iter=max_iter, tol=tol))
    except SingularityError:
        return math.inf


# --------------------------------------------------------------------------
# sweeps

def _final_error(cfg, setup, problem, method, bands, beta1=None, beta2=None):
    """Relative model error of one continuation run, or ``(nan, reason)``."""
    reason = ""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            rc = run_config(cfg, setup, method, bands, beta1, beta2)
            model, _ = run_continuation(rc, problem, setup.m_init)
            err = relative_model_error(setup.m_true, model)
        except LrwiError as exc:
            if isinstance(exc, ConfigError):
                raise
            err, reason = math.nan, f"{type(exc).__name__}: {exc}"
    notes = sorted({str(w.message) for w in caught if "points per wavelength" not in str(w.message)})
    if notes:
        reason = "; ".join(([reason] if reason else []) + notes)
    return err, reason


def _need_truth(setup):
    if setup.m_true is None or setup.m_init is None:
        raise ConfigError("sweeps need both a true model (model.*) and an initial model (initial.*)")


def betasweep(cfg: Config, seed=None):
    """WRI over the beta1 grid and LRWI over the (beta1, beta2) grid.

    With ``betasweep.include_fwi`` an FWI reference row (empty betas) comes
    first. ``beta2`` at or below the near-singular threshold is still run;
    its row carries the warning in ``reason``.
    """
    setup = build_setup(cfg, seed, need_initial=True)
    _need_truth(setup)
    bands = inversion_bands(cfg)
    problem = setup.problem(observed_data(cfg, setup, all_frequencies(bands)))
    rows = []
    if cfg.get("betasweep", "include_fwi"):
        rows.append(("fwi", "", "", *_final_error(cfg, setup, problem, "fwi", bands)))
    for b1 in cfg.get("betasweep", "beta1"):
        rows.append(("wri", b1, "", *_final_error(cfg, setup, problem, "wri", bands, b1)))
    for b1 in cfg.get("betasweep", "beta1"):
        for b2 in cfg.get("betasweep", "beta2"):
            err, reason = _final_error(cfg, setup, problem, "lrwi", bands, b1, b2)
            if b2 <= NEAR_SINGULAR_BETA2 and not reason:
                reason = "beta2 at or below the near-singular threshold"
            rows.append(("lrwi", b1, b2, err, reason))
    return rows


def shifted_bands(bands, f_start):
    """Bands translated so the first frequency equals ``f_start``."""
    shift = f_start - bands[0][0]
    out = [tuple(round(f + shift, 9) for f in band) for band in bands]
    if out[0][0] <= 0:
        raise ConfigError(f"starting frequency {f_start} gives nonpositive frequencies")
    return out


def freqsweep(cfg: Config, seed=None):
    """All three methods for every starting frequency in ``freqsweep.starts``."""
    setup = build_setup(cfg, seed, need_initial=True)
    _need_truth(setup)
    bands = inversion_bands(cfg)
    plans = [(f0, shifted_bands(bands, f0)) for f0 in cfg.require("freqsweep", "starts")]
    freqs = all_frequencies([b for _, bs in plans for b in bs])
    problem = setup.problem(observed_data(cfg, setup, freqs))
    rows = []
    for f0, bs in plans:
        for method in ("fwi", "wri", "lrwi"):
            rows.append((method, f0, *_final_error(cfg, setup, problem, method, bs)))
    return rows
