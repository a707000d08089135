"""l-BFGS, the angle step, per-band drivers and frequency continuation."""
from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError
from .grid import Rank2Model, SlownessModel, combine, relative_model_error, split
from .objectives import Problem, fwi_value_grad, lrwi_value_grad, wri_value_grad
from .penalty import PenaltyConfig, estimate_mu2, mu1_from_matrix, schedule_step

log = logging.getLogger(__name__)

ARMIJO_C1 = 1e-4
MAX_BACKTRACKS = 30
THETA_STEP0 = 0.1
EARLY_EXIT_RTOL = 1e-10

REPORT_COLUMNS = ("iter", "band", "objective", "data_term", "pde_term", "rank1_term",
                  "grad_norm", "theta", "rel_model_error")


# --------------------------------------------------------------------------
# l-BFGS

@dataclass
class LbfgsState:
    """Curvature pairs ``(s, y)`` (newest last) and an iteration counter.

    ``init_step`` is the largest per-component change of the first trial
    step when no curvature information is stored.
    """

    capacity: int = 10
    init_step: float = 1.0
    pairs: deque = field(default_factory=deque)
    iteration: int = 0

    def reset(self):
        self.pairs.clear()

    def push(self, s, y):
        sy = float(np.dot(s, y))
        if not sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        if self.capacity <= 0:
            return False
        self.pairs.append((s, y, 1.0 / sy))
        while len(self.pairs) > self.capacity:
            self.pairs.popleft()
        return True

    def direction(self, g):
        if not self.pairs:
            return -g * (self.init_step / np.max(np.abs(g)))
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        s, y, _ = self.pairs[-1]
        q *= np.dot(s, y) / np.dot(y, y)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        return -q


@dataclass
class StepResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    state: LbfgsState
    step: float
    status: str  # "ok", "fallback", "converged" or "stall"


def _backtrack(x, f, g, d, eval_fn, project):
    t = 1.0
    for _ in range(MAX_BACKTRACKS + 1):
        trial = x + t * d
        if project is not None:
            trial = project(trial)
        dec = float(np.dot(g, trial - x))
        if dec < 0:
            f_new, g_new = eval_fn(trial)
            if np.isfinite(f_new) and f_new <= f + ARMIJO_C1 * dec:
                return trial, f_new, g_new, t
        t *= 0.5
    return None


def lbfgs_step(state: LbfgsState, x, f, grad, eval_fn, project=None) -> StepResult:
    """One l-BFGS iteration with Armijo backtracking.

    ``eval_fn(x) -> (value, gradient)``. On line-search failure the step is
    retried once along scaled steepest descent with the memory cleared;
    if that fails too the result carries ``status='stall'`` and ``x`` unchanged.
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(grad, dtype=float)
    state.iteration += 1
    if not np.any(g):
        return StepResult(x, f, g, state, 0.0, "converged")
    d = state.direction(g)
    status = "ok"
    if not np.dot(g, d) < 0:
        state.reset()
        d = state.direction(g)
    found = _backtrack(x, f, g, d, eval_fn, project)
    if found is None and state.pairs:
        state.reset()
        status = "fallback"
        found = _backtrack(x, f, g, state.direction(g), eval_fn, project)
    if found is None:
        return StepResult(x, f, g, state, 0.0, "stall")
    x_new, f_new, g_new, t = found
    state.push(x_new - x, np.asarray(g_new) - g)
    return StepResult(x_new, f_new, np.asarray(g_new, dtype=float), state, t, status)


def lbfgs_minimize(eval_fn, x0, n_iter, memory=10, init_step=1.0, gtol=0.0, project=None,
                   callback=None):
    """Plain l-BFGS loop, mainly for tests and small problems."""
    state = LbfgsState(memory, init_step)
    x = np.asarray(x0, dtype=float)
    f, g = eval_fn(x)
    for _ in range(n_iter):
        if np.linalg.norm(g) <= gtol:
            break
        res = lbfgs_step(state, x, f, g, eval_fn, project)
        x, f, g = res.x, res.f, res.grad
        if callback is not None:
            callback(res)
        if res.status in ("stall", "converged"):
            break
    return x, f, g


def theta_step(theta, grad_theta, eval_fn, f0, step0=THETA_STEP0):
    """Backtracking gradient step on the mixing angle.

    The first trial moves ``step0`` radians against the gradient; accepted
    steps satisfy Armijo. Returns ``(theta_next, f_next)``, unchanged when
    nothing is accepted within the backtracking budget.
    """
    if grad_theta == 0 or not np.isfinite(grad_theta):
        return theta, f0
    sgn = math.copysign(1.0, grad_theta)
    t = step0
    for _ in range(MAX_BACKTRACKS + 1):
        trial = theta - t * sgn
        f_new = eval_fn(trial)
        if np.isfinite(f_new) and f_new <= f0 - ARMIJO_C1 * t * abs(grad_theta):
            return trial, f_new
        t *= 0.5
    return theta, f0


def apply_bounds(m: SlownessModel, v_min: float, v_max: float) -> SlownessModel:
    """Clip the velocity equivalent of ``m`` into ``[v_min, v_max]``."""
    if not v_min < v_max:
        raise ConfigError(f"need v_min < v_max, got {v_min}, {v_max}")
    return SlownessModel(m.grid, _clip(m.values, v_min, v_max))


def _clip(values, v_min, v_max):
    return np.clip(values, 1.0 / v_max**2, 1.0 / v_min**2)


# --------------------------------------------------------------------------
# configuration and reports

@dataclass
class RunConfig:
    method: str
    bands: list
    iters_per_band: int = 45
    penalties: PenaltyConfig = field(default_factory=PenaltyConfig)
    theta0: float = math.pi / 4
    bounds: Optional[tuple] = (1.0, 6.5)
    lrwi_all_bands: bool = False
    freeze_lambda: bool = False
    memory: int = 10
    init_step: float = 0.05
    m_true: Optional[SlownessModel] = None

    def __post_init__(self):
        if self.method not in ("fwi", "wri", "lrwi"):
            raise ConfigError(f"unknown method {self.method!r}")
        if not self.bands:
            raise ConfigError("at least one frequency band is required")
        self.bands = [tuple(float(f) for f in band) for band in self.bands]
        for band in self.bands:
            if not band or list(band) != sorted(band):
                raise ConfigError(f"band {band} must be nonempty and ascending")
        if self.iters_per_band < 1:
            raise ConfigError("iters_per_band must be >= 1")


@dataclass
class RunReport:
    rows: list = field(default_factory=list)
    bands: list = field(default_factory=list)
    model: Optional[SlownessModel] = None
    rank2: Optional[Rank2Model] = None
    failed: Optional[str] = None

    def add(self, **row):
        self.rows.append({k: row.get(k, "") for k in REPORT_COLUMNS})

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for row in self.rows:
                w.writerow([_fmt(row[k]) for k in REPORT_COLUMNS])

    @property
    def final_error(self):
        errs = [r["rel_model_error"] for r in self.rows if r["rel_model_error"] != ""]
        return errs[-1] if errs else None


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _error(cfg, values):
    if cfg.m_true is None:
        return ""
    return relative_model_error(cfg.m_true, SlownessModel(cfg.m_true.grid, values))


def _stop(g, g0):
    return np.max(np.abs(g)) < EARLY_EXIT_RTOL * g0


# --------------------------------------------------------------------------
# band drivers

def _run_model_band(m0, problem, cfg, band_index, report, evaluate):
    project = None
    if cfg.bounds is not None:
        lo, hi = cfg.bounds
        project = lambda x: _clip(x, lo, hi)  # noqa: E731
    grid = m0.grid
    x = m0.values.copy() if project is None else project(m0.values.copy())

    def eval_fn(v):
        rep, g = evaluate(SlownessModel(grid, v))
        eval_fn.last = rep
        return rep.total, g

    f, g = eval_fn(x)
    rep = eval_fn.last
    g0 = np.max(np.abs(g))
    report.add(iter=0, band=band_index, objective=f, data_term=rep.data_term,
               pde_term=rep.pde_term, rank1_term=rep.rank1_term,
               grad_norm=float(np.linalg.norm(g)), rel_model_error=_error(cfg, x))
    state = LbfgsState(cfg.memory, cfg.init_step * float(np.max(np.abs(x))))
    for k in range(1, cfg.iters_per_band + 1):
        if g0 == 0 or _stop(g, g0):
            break
        res = lbfgs_step(state, x, f, g, eval_fn, project)
        if res.status == "stall":
            log.info("band %d: line search stalled at iteration %d", band_index, k)
            break
        x, f, g = res.x, res.f, res.grad
        rep = eval_fn.last if res.step else rep
        report.add(iter=k, band=band_index, objective=f, data_term=rep.data_term,
                   pde_term=rep.pde_term, rank1_term=rep.rank1_term,
                   grad_norm=float(np.linalg.norm(g)), rel_model_error=_error(cfg, x))
    return SlownessModel(grid, x)


def run_fwi_band(m0: SlownessModel, problem: Problem, cfg: RunConfig, band_index=0, report=None):
    report = RunReport() if report is None else report
    m = _run_model_band(m0, problem, cfg, band_index, report,
                        lambda m: fwi_value_grad(m, problem))
    return m, report


def run_wri_band(m0: SlownessModel, problem: Problem, lam: float, cfg: RunConfig,
                 band_index=0, report=None):
    report = RunReport() if report is None else report
    m = _run_model_band(m0, problem, cfg, band_index, report,
                        lambda m: wri_value_grad(m, lam, problem))
    return m, report


def run_lrwi_band(r0: Rank2Model, problem: Problem, lam: float, gamma: float, cfg: RunConfig,
                  band_index=0, report=None):
    """Alternating rank-2 iterations: l-BFGS on ``(m1, m2)``, then a step in ``theta``.

    Every evaluation re-solves the projected wavefields at exactly the
    ``(m1, m2, theta)`` it reports on, so the angle gradient after the model
    update comes from fresh wavefields.
    """
    report = RunReport() if report is None else report
    grid = r0.grid
    theta = r0.theta
    x = r0.stacked().copy()
    cache = {}

    def evaluate(v, th, need_grad=True):
        key = (v.tobytes(), th, need_grad)
        if key not in cache:
            if len(cache) > 8:
                cache.clear()
            cache[key] = lrwi_value_grad(Rank2Model(grid, v[:grid.n], v[grid.n:], th),
                                         lam, gamma, problem, need_grad=need_grad)
        return cache[key]

    def record(k, ev, th, x_now):
        m = math.sin(th) * x_now[:grid.n] + math.cos(th) * x_now[grid.n:]
        r = ev.report
        report.add(iter=k, band=band_index, objective=r.total, data_term=r.data_term,
                   pde_term=r.pde_term, rank1_term=r.rank1_term,
                   grad_norm=float(np.linalg.norm(ev.grad_m)), theta=th,
                   rel_model_error=_error(cfg, m))

    ev = evaluate(x, theta)
    record(0, ev, theta, x)
    g0 = np.max(np.abs(ev.grad_m))
    state = LbfgsState(cfg.memory, cfg.init_step * float(np.max(np.abs(x))))
    for k in range(1, cfg.iters_per_band + 1):
        if g0 == 0 or _stop(ev.grad_m, g0):
            break
        th = theta
        res = lbfgs_step(state, x, ev.report.total, ev.grad_m,
                         lambda v: (lambda e: (e.report.total, e.grad_m))(evaluate(v, th)))
        x = res.x
        ev = evaluate(x, theta)
        new_theta, _ = theta_step(theta, ev.grad_theta,
                                  lambda t: evaluate(x, t, need_grad=False).report.total,
                                  ev.report.total)
        if new_theta != theta:
            theta = new_theta
            ev = evaluate(x, theta)
        record(k, ev, theta, x)
        if res.status == "stall" and new_theta == th:
            log.info("band %d: rank-2 iteration stalled at %d", band_index, k)
            break
    return Rank2Model(grid, x[:grid.n], x[grid.n:], theta), report


# --------------------------------------------------------------------------
# continuation

def band_mu1(m: SlownessModel, problem: Problem, band):
    f = min(band)
    return mu1_from_matrix(problem.helmholtz(m.values, f), problem.P)


def band_mu2(r2: Rank2Model, lam, problem: Problem, band):
    f = min(band)
    return estimate_mu2(r2, lam, f, problem.P, problem.laplacian(f))


def run_continuation(cfg: RunConfig, problem: Problem, initial):
    """Invert band after band, each warm-started from the previous result.

    ``initial`` is a :class:`SlownessModel` (split at ``cfg.theta0`` for LRWI)
    or a :class:`Rank2Model`. With ``method='lrwi'`` only the first band
    runs LRWI and later bands run FWI from the combined model, unless
    ``cfg.lrwi_all_bands`` is set. Returns ``(final_model, report)``; on a
    numerical failure the partial report has ``failed`` set and the
    exception propagates with ``report`` attached.
    """
    report = RunReport()
    pens = cfg.penalties
    if isinstance(initial, Rank2Model):
        r2, m = initial, combine(initial)
    else:
        r2, m = None, initial
    lam = None
    try:
        for b, band in enumerate(cfg.bands):
            sub = problem.restrict(band)
            use_lrwi = cfg.method == "lrwi" and (b == 0 or cfg.lrwi_all_bands)
            summary = {"band": b, "frequencies": band, "initial_model": m}
            if cfg.method == "wri" or use_lrwi:
                pens = schedule_step(pens, b) if b else pens
                if lam is None or not cfg.freeze_lambda:
                    base = combine(r2) if (use_lrwi and r2 is not None) else m
                    pens = replace(pens, mu1=band_mu1(base, sub, band))
                lam = pens.lam
                summary.update(mu1=pens.mu1, lam=lam)
            if cfg.method == "fwi" or (cfg.method == "lrwi" and not use_lrwi):
                m, _ = run_fwi_band(m, sub, cfg, b, report)
            elif cfg.method == "wri":
                m, _ = run_wri_band(m, sub, lam, cfg, b, report)
            else:
                if r2 is None:
                    r2 = split(m, cfg.theta0)
                mu2 = band_mu2(r2, lam, sub, band)
                pens = replace(pens, mu2=mu2)
                summary.update(mu2=mu2, gamma=pens.gamma)
                r2, _ = run_lrwi_band(r2, sub, lam, pens.gamma, cfg, b, report)
                m = combine(r2)
                if cfg.bounds is not None:
                    m = apply_bounds(m, *cfg.bounds)
                report.rank2 = r2
            summary["final_model"] = m
            if cfg.m_true is not None:
                summary["rel_model_error"] = relative_model_error(cfg.m_true, m)
            report.bands.append(summary)
    except Exception as exc:
        report.failed = f"{type(exc).__name__}: {exc}"
        report.model = m
        exc.report = report
        raise
    report.model = m
    return m, report
