"""Objectives and gradients: reduced FWI, projected WRI and rank-2 LRWI.

All wavefield blocks are ``(n_g, n_s)`` arrays with one column per source;
data blocks are ``(n_r, n_s)``. Transposes of complex blocks are conjugate
transposes, and gradients with respect to real parameters take the real part.

Rank-2 objective for one frequency (summed over sources)::

    f = 1/2 ||r||^2 + lambda/2 ||p||^2 + gamma/2 ||s||^2
    r = P (sin t u1 + cos t u2) - d
    p = L (sin t u1 + cos t u2) + w^2 (m1*u1 + m2*u2) - q
    s = m1*u2 - m2*u1

The wavefields are eliminated by the least-squares solve of the stacked
system ``S~ [u1; u2] = [d; sqrt(lambda) q; 0]``. Higher ranks (r > 2) would
add further ``(m_l, u_l)`` pairs and angles on the unit sphere; they are not
implemented.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .acquisition import Geometry, ObservedData, ProjectionOperator, SourceSpectrum, \
    check_geometry, source_matrix
from .errors import ShapeError, SingularityError, SizeError
from .grid import Rank2Model, SlownessModel
from .helmholtz import laplacian
from .linalg import NormalEquations, factorize

PROJECTION_RTOL = 1e-8


@dataclass(eq=False)
class Problem:
    """Everything an objective needs besides the model and penalties."""

    geometry: Geometry
    data: ObservedData
    spectrum: SourceSpectrum
    bc_slowness: np.ndarray
    _lap: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        check_geometry(self.geometry, self.data)
        bc = np.broadcast_to(np.asarray(self.bc_slowness, dtype=float), (self.grid.n,)).copy()
        bc.setflags(write=False)
        self.bc_slowness = bc
        self.P = ProjectionOperator.from_geometry(self.geometry).matrix
        self.PH = self.P.T.tocsr()

    @property
    def grid(self):
        return self.geometry.grid

    @property
    def frequencies(self):
        return self.data.frequencies

    def laplacian(self, f):
        if f not in self._lap:
            self._lap[f] = laplacian(self.grid, 2 * math.pi * f, self.bc_slowness)
        return self._lap[f]

    def helmholtz(self, values, f):
        omega = 2 * math.pi * f
        return (self.laplacian(f) + sp.diags(omega**2 * np.asarray(values, dtype=float))).tocsr()

    def sources(self, f):
        return source_matrix(self.geometry, self.spectrum.weight(f))

    def observed(self, f):
        return np.asarray(self.data.at(f)).T

    def restrict(self, freqs):
        sub = Problem(self.geometry, self.data.select(freqs), self.spectrum, self.bc_slowness)
        sub._lap = {f: self._lap[f] for f in freqs if f in self._lap}
        return sub


@dataclass
class ObjectiveReport:
    total: float
    data_term: float
    pde_term: float = 0.0
    rank1_term: float = 0.0
    # (source, frequency) -> (data, pde, rank1)
    breakdown: dict = field(default_factory=dict)

    @classmethod
    def from_terms(cls, parts):
        """Sum per-(source, frequency) terms in their given order."""
        data = pde = rank1 = 0.0
        for a, b, c in parts.values():
            data += a
            pde += b
            rank1 += c
        return cls(data + pde + rank1, data, pde, rank1, dict(parts))


def _colsq(X):
    return 0.5 * np.sum(np.abs(X) ** 2, axis=0)


def _accumulate(parts, f, data, pde=None, rank1=None):
    ns = data.size
    pde = np.zeros(ns) if pde is None else pde
    rank1 = np.zeros(ns) if rank1 is None else rank1
    for i in range(ns):
        parts[(i, f)] = (float(data[i]), float(pde[i]), float(rank1[i]))


# --------------------------------------------------------------------------
# reduced FWI

def fwi_value_grad(m: SlownessModel, problem: Problem):
    """Reduced FWI misfit and its adjoint-state gradient.

    Per frequency: ``u = A^-1 q``, ``v = A^-H P^T (P u - d)`` and the gradient
    contribution ``-w^2 Re(conj(u) * v)`` summed over sources.
    Returns ``(report, gradient)``.
    """
    grad = np.zeros(problem.grid.n)
    parts = {}
    for f in problem.frequencies:
        omega = 2 * math.pi * f
        A = problem.helmholtz(m.values, f)
        try:
            fact = factorize(A)
        except SingularityError as exc:
            exc.context.update(frequency=f)
            raise
        U = fact.solve(problem.sources(f))
        R = problem.P @ U - problem.observed(f)
        _accumulate(parts, f, _colsq(R))
        V = fact.solve(problem.PH @ R, trans="H")
        grad += -omega**2 * np.sum(np.real(np.conj(U) * V), axis=1)
    return ObjectiveReport.from_terms(parts), grad


def fwi_value(m: SlownessModel, problem: Problem) -> float:
    return fwi_value_grad(m, problem)[0].total


# --------------------------------------------------------------------------
# penalty WRI with variable projection

def wri_system(A, P, lam):
    """Stacked matrix ``[P; sqrt(lam) A]``."""
    return sp.vstack([P, math.sqrt(lam) * A]).tocsr()


def wri_solve_u(A, P, lam, d, q, context=None):
    """Minimizer of ``||P u - d||^2 + lam ||A u - q||^2`` over complex ``u``.

    Solves ``(P^T P + lam A^H A) u = P^T d + lam A^H q``; ``d`` and ``q`` may be
    vectors or column blocks.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    ne = NormalEquations(wri_system(A, P, lam), rtol=PROJECTION_RTOL, context=context)
    rhs = np.concatenate([np.asarray(d, dtype=complex), math.sqrt(lam) * np.asarray(q, dtype=complex)])
    return ne.solve(rhs)


def wri_value_grad(m: SlownessModel, lam: float, problem: Problem):
    """Projected WRI objective and gradient ``lam w^2 Re(conj(u*) (A u* - q))``."""
    grad = np.zeros(problem.grid.n)
    parts = {}
    for f in problem.frequencies:
        omega = 2 * math.pi * f
        A = problem.helmholtz(m.values, f)
        Q = problem.sources(f)
        D = problem.observed(f)
        U = wri_solve_u(A, problem.P, lam, D, Q, context={"frequency": f, "lambda": lam})
        R = problem.P @ U - D
        Pde = A @ U - Q
        _accumulate(parts, f, _colsq(R), lam * _colsq(Pde))
        grad += lam * omega**2 * np.sum(np.real(np.conj(U) * Pde), axis=1)
    return ObjectiveReport.from_terms(parts), grad


def wri_value(m: SlownessModel, lam: float, problem: Problem, U=None) -> float:
    """WRI objective; with ``U`` given, evaluates ``f_p(m, U)`` instead of projecting."""
    if U is None:
        return wri_value_grad(m, lam, problem)[0].total
    total = 0.0
    for f in problem.frequencies:
        A = problem.helmholtz(m.values, f)
        Uf = U[f]
        total += float(np.sum(_colsq(problem.P @ Uf - problem.observed(f))))
        total += lam * float(np.sum(_colsq(A @ Uf - problem.sources(f))))
    return total


# --------------------------------------------------------------------------
# rank-2 LRWI

@dataclass(eq=False)
class Rank2Wavefield:
    """Wavefield pair, each ``(n_g,)`` or ``(n_g, n_s)``."""

    u1: np.ndarray
    u2: np.ndarray

    def __post_init__(self):
        self.u1 = np.asarray(self.u1, dtype=complex)
        self.u2 = np.asarray(self.u2, dtype=complex)
        if self.u1.shape != self.u2.shape:
            raise ShapeError("wavefield components differ in shape")
        if not (np.all(np.isfinite(self.u1)) and np.all(np.isfinite(self.u2))):
            raise ValueError("wavefield has non-finite entries")

    @classmethod
    def from_rank1(cls, u, theta):
        return cls(math.sin(theta) * np.asarray(u), math.cos(theta) * np.asarray(u))


@dataclass
class Residuals:
    p: np.ndarray
    s: np.ndarray
    r: np.ndarray


def _aug_blocks(r2: Rank2Model, lam, gamma, omega, P, L, theta):
    st, ct = math.sin(theta), math.cos(theta)
    A1 = st * L + sp.diags(omega**2 * r2.m1)
    A2 = ct * L + sp.diags(omega**2 * r2.m2)
    return st, ct, A1, A2


def build_augmented(r2: Rank2Model, lam, gamma, omega, P, L, theta=None):
    """Stacked least-squares matrix ``S~`` of shape ``(n_r + 2 n_g, 2 n_g)``.

    Row blocks: ``[sin P, cos P]``, ``sqrt(lam) [A1, A2]`` and
    ``sqrt(gamma) [diag(m2), -diag(m1)]`` with ``A1 = sin L + w^2 diag(m1)``,
    ``A2 = cos L + w^2 diag(m2)``.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    theta = r2.theta if theta is None else theta
    st, ct, A1, A2 = _aug_blocks(r2, lam, gamma, omega, P, L, theta)
    sl, sg = math.sqrt(lam), math.sqrt(gamma)
    P = sp.csr_matrix(P)
    return sp.bmat([
        [st * P, ct * P],
        [sl * A1, sl * A2],
        [sg * sp.diags(r2.m2), -sg * sp.diags(r2.m1)],
    ], format="csr", dtype=complex)


def augmented_rhs(lam, d, q):
    d = np.asarray(d, dtype=complex)
    q = np.asarray(q, dtype=complex)
    return np.concatenate([d, math.sqrt(lam) * q, np.zeros_like(q)])


def rank2_normal_equations(r2, lam, gamma, omega, P, L, theta=None):
    theta = r2.theta if theta is None else theta
    ctx = {"lambda": lam, "gamma": gamma, "omega": omega}
    return NormalEquations(build_augmented(r2, lam, gamma, omega, P, L, theta),
                           rtol=PROJECTION_RTOL, context=ctx)


def solve_rank2_u(r2: Rank2Model, lam, gamma, d, q, omega, P, L, theta=None, ne=None):
    """Projected wavefield pair minimizing the rank-2 objective at fixed model.

    Solves ``S~^H S~ u = S~^H [d; sqrt(lam) q; 0]``. A residual above
    ``1e-8 ||S~^H rhs||`` after refinement raises :class:`ProjectionError`.
    """
    if ne is None:
        ne = rank2_normal_equations(r2, lam, gamma, omega, P, L, theta)
    x = ne.solve(augmented_rhs(lam, d, q))
    n = r2.grid.n
    return Rank2Wavefield(x[:n], x[n:])


def lrwi_residuals(r2: Rank2Model, u: Rank2Wavefield, d, q, omega, P, L, theta=None):
    theta = r2.theta if theta is None else theta
    st, ct = math.sin(theta), math.cos(theta)
    m1 = r2.m1.reshape((-1,) + (1,) * (u.u1.ndim - 1))
    m2 = r2.m2.reshape(m1.shape)
    mix = st * u.u1 + ct * u.u2
    p = L @ mix + omega**2 * (m1 * u.u1 + m2 * u.u2) - q
    s = m1 * u.u2 - m2 * u.u1
    r = P @ mix - d
    return Residuals(p, s, r)


def _terms(res: Residuals, lam, gamma):
    return _colsq(res.r), lam * _colsq(res.p), gamma * _colsq(res.s)


def lrwi_value(r2, u, lam, gamma, d, q, omega, P, L, theta=None) -> ObjectiveReport:
    """Rank-2 objective for one frequency (columns of ``d``/``q`` are sources)."""
    res = lrwi_residuals(r2, u, d, q, omega, P, L, theta)
    a, b, c = (np.atleast_1d(t) for t in _terms(res, lam, gamma))
    parts = {(i, omega): (float(a[i]), float(b[i]), float(c[i])) for i in range(a.size)}
    return ObjectiveReport.from_terms(parts)


def lrwi_grads(r2, u, lam, gamma, d, q, omega, P, L, theta=None, res=None):
    """Gradients of the projected rank-2 objective at the projected ``u``.

    Returns ``(grad_m, grad_theta)`` with ``grad_m = [grad_m1; grad_m2]``.
    """
    theta = r2.theta if theta is None else theta
    if res is None:
        res = lrwi_residuals(r2, u, d, q, omega, P, L, theta)
    w2 = omega**2
    g1 = np.real(lam * w2 * np.conj(u.u1) * res.p + gamma * np.conj(u.u2) * res.s)
    g2 = np.real(lam * w2 * np.conj(u.u2) * res.p - gamma * np.conj(u.u1) * res.s)
    if g1.ndim > 1:
        g1 = g1.sum(axis=1)
        g2 = g2.sum(axis=1)

    def inner(a, b):
        return np.real(np.vdot(a, b))

    gt = (math.cos(theta) * (inner(P @ u.u1, res.r) + lam * inner(L @ u.u1, res.p))
          - math.sin(theta) * (inner(P @ u.u2, res.r) + lam * inner(L @ u.u2, res.p)))
    return np.concatenate([g1, g2]), float(gt)


@dataclass
class Rank2Evaluation:
    report: ObjectiveReport
    grad_m: np.ndarray
    grad_theta: float
    wavefields: dict
    projection_residual: float


def lrwi_value_grad(r2: Rank2Model, lam, gamma, problem: Problem, need_grad=True):
    """Projected rank-2 objective over all sources and frequencies of ``problem``.

    One factorization of ``S~^H S~`` per frequency serves every source.
    """
    n = problem.grid.n
    grad_m = np.zeros(2 * n)
    grad_t = 0.0
    parts = {}
    waves = {}
    worst = 0.0
    for f in problem.frequencies:
        omega = 2 * math.pi * f
        L = problem.laplacian(f)
        D = problem.observed(f)
        Q = problem.sources(f)
        ne = rank2_normal_equations(r2, lam, gamma, omega, problem.P, L)
        ne.context["frequency"] = f
        rhs = augmented_rhs(lam, D, Q)
        x = ne.solve(rhs)
        worst = max(worst, float(np.max(ne.residual(x, rhs))))
        u = Rank2Wavefield(x[:n], x[n:])
        waves[f] = u
        res = lrwi_residuals(r2, u, D, Q, omega, problem.P, L)
        a, b, c = _terms(res, lam, gamma)
        _accumulate(parts, f, a, b, c)
        if need_grad:
            gm, gt = lrwi_grads(r2, u, lam, gamma, D, Q, omega, problem.P, L, res=res)
            grad_m += gm
            grad_t += gt
    return Rank2Evaluation(ObjectiveReport.from_terms(parts), grad_m, grad_t, waves, worst)


def s_rank_deficiency_check(r2: Rank2Model, lam, omega, P, L, gamma=0.0, max_cols=4000,
                            rtol=None):
    """Numerical rank of the stacked rank-2 system by dense SVD.

    With ``gamma = 0`` this is the data + PDE system of shape
    ``(n_r + n_g) x 2 n_g``; otherwise the full ``S~``. Returns
    ``(rank, nullity)`` where ``nullity = 2 n_g - rank``.
    """
    n = r2.grid.n
    if 2 * n > max_cols:
        raise SizeError(f"dense SVD limited to {max_cols} columns, problem has {2 * n}")
    S = build_augmented(r2, lam, gamma, omega, P, L).toarray()
    if gamma == 0:
        S = S[:P.shape[0] + n]
    sv = np.linalg.svd(S, compute_uv=False)
    if rtol is None:
        rtol = max(S.shape) * np.finfo(float).eps
    rank = int(np.sum(sv > rtol * sv[0]))
    return rank, 2 * n - rank
