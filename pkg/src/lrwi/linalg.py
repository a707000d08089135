"""Sparse complex factorizations, normal equations and power iteration."""
from __future__ import annotations

import contextlib
import math

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ProjectionError, ShapeError, SingularityError

PIVOT_TOL = 1e-14

# dimensions of every matrix factorized while a tracker is active
_trackers = []


@contextlib.contextmanager
def track_factorizations():
    """Record the order of every matrix factorized inside the block.

    >>> with track_factorizations() as dims:
    ...     factorize(sp.identity(3, format="csc"))  # doctest: +ELLIPSIS
    <...>
    >>> dims
    [3]
    """
    dims = []
    _trackers.append(dims)
    try:
        yield dims
    finally:
        _trackers.remove(dims)


def as_sparse(M):
    if sp.issparse(M):
        out = M.tocsc()
    else:
        out = sp.csc_matrix(np.atleast_2d(np.asarray(M)))
    out.sum_duplicates()
    return out


class Factorization:
    """Sparse LU with partial pivoting of a square matrix.

    Read-only after construction, so one instance may serve many solves.
    """

    def __init__(self, M):
        M = as_sparse(M).astype(complex)
        n, k = M.shape
        if n != k:
            raise ShapeError(f"cannot factorize a non-square {n}x{k} matrix")
        if n == 0:
            raise ShapeError("cannot factorize an empty matrix")
        self.matrix = M
        self.n = n
        scale = abs(M).max() if M.nnz else 0.0
        if scale == 0.0:
            raise SingularityError("matrix is identically zero", pivot=0)
        try:
            self._lu = spla.splu(M)
        except RuntimeError as exc:
            raise SingularityError(f"structurally or exactly singular matrix: {exc}") from None
        piv = np.abs(self._lu.U.diagonal())
        bad = np.flatnonzero(piv < PIVOT_TOL * scale)
        if bad.size:
            # report the pivot index in the original column ordering
            col = int(self._lu.perm_c[bad[0]]) if self._lu.perm_c is not None else int(bad[0])
            raise SingularityError(
                f"numerically singular matrix, |pivot| = {piv[bad[0]]:.3e} "
                f"< {PIVOT_TOL:g} * max|entry| = {PIVOT_TOL * scale:.3e}", pivot=col)
        for dims in _trackers:
            dims.append(n)

    def solve(self, b, trans="N"):
        """Solve ``M x = b`` (``trans='N'``) or ``M^H x = b`` (``trans='H'``)."""
        b = np.asarray(b, dtype=complex)
        if b.shape[0] != self.n:
            raise ShapeError(f"right-hand side has {b.shape[0]} rows, matrix has {self.n}")
        return self._lu.solve(b, trans=trans)


def factorize(M) -> Factorization:
    return Factorization(M)


def solve(fact: Factorization, b, trans="N"):
    return fact.solve(b, trans=trans)


def power_iteration(apply, n, max_iter=300, tol=1e-6, seed=0, full_output=False):
    """Largest eigenvalue of a Hermitian positive semidefinite operator.

    ``apply`` maps a complex vector of length ``n`` to another. Iterates until
    ``||apply(x) - lam*x|| <= tol*lam`` for the unit vector ``x``. With
    ``full_output`` returns ``(lam, converged, iterations)``.
    """
    if n <= 0:
        raise ShapeError("power iteration needs n >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        y = np.asarray(apply(x), dtype=complex)
        lam = float(np.real(np.vdot(x, y)))
        ynorm = np.linalg.norm(y)
        if ynorm == 0.0:
            lam = 0.0
            converged = True
            break
        if lam > 0 and np.linalg.norm(y - lam * x) <= tol * lam:
            converged = True
            break
        x = y / ynorm
    if full_output:
        return lam, converged, it
    return lam


def condition_estimate(M, max_iter=300, tol=1e-6, seed=0, full_output=False):
    """2-norm condition number estimate ``sigma_max(M) / sigma_min(M)``.

    Both extremes come from power iteration: on ``M^H M`` applied matrix-free
    and on ``M^-H M^-1`` applied through one factorization of ``M``.
    """
    M = as_sparse(M).astype(complex)
    fact = factorize(M)
    MH = M.conj().T.tocsr()
    Mr = M.tocsr()
    n = M.shape[0]
    big, ok1, it1 = power_iteration(lambda x: MH @ (Mr @ x), n, max_iter, tol, seed, True)
    inv, ok2, it2 = power_iteration(lambda x: fact.solve(fact.solve(x), trans="H"),
                                    n, max_iter, tol, seed + 1, True)
    kappa = math.sqrt(max(big, 0.0)) * math.sqrt(max(inv, 0.0))
    if full_output:
        return kappa, ok1 and ok2, it1 + it2
    return kappa


REFINE_STOP = 1e-11


class NormalEquations:
    """Least squares ``min ||S x - b||`` through ``S^H S x = S^H b``.

    ``S^H S`` is assembled and factorized once; every solve is followed by
    refinement steps with the residual ``S^H (b - S x)`` computed from ``S``
    itself, until a correction is below ``REFINE_STOP`` relative to ``x`` (at
    most ``max_refine`` of them). The final iterate must satisfy
    ``||S^H (S x - b)|| <= rtol * ||S^H b||``, otherwise
    :class:`ProjectionError` is raised.
    """

    def __init__(self, S, rtol=1e-8, max_refine=4, context=None):
        self.S = sp.csr_matrix(S, dtype=complex)
        self.SH = self.S.conj().T.tocsr()
        self.normal = (self.SH @ self.S).tocsc()
        self.rtol = rtol
        self.max_refine = max_refine
        self.context = dict(context or {})
        try:
            self.fact = factorize(self.normal)
        except SingularityError as exc:
            exc.context.update(self.context)
            raise

    def rhs(self, b):
        return self.SH @ np.asarray(b, dtype=complex)

    def _normal_residual(self, x, b):
        # S^H (b - S x) without going through the formed S^H S; this is the
        # corrected semi-normal form, which keeps the forward error near
        # cond(S) eps instead of cond(S)^2 eps
        return self.SH @ (np.asarray(b, dtype=complex) - self.S @ x)

    def residual(self, x, b):
        """Relative normal-equation residual, per column when ``b`` is 2-D."""
        g = self.rhs(b)
        r = self._normal_residual(x, b)
        num = np.linalg.norm(np.atleast_2d(r.T), axis=1)
        den = np.linalg.norm(np.atleast_2d(g.T), axis=1)
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), num)

    def solve(self, b):
        g = self.rhs(b)
        x = self.fact.solve(g)
        gnorm = np.linalg.norm(np.atleast_2d(g.T), axis=1)
        # corrected semi-normal steps until the correction is negligible
        self.last_refinements = 0
        for k in range(self.max_refine + 1):
            r = self._normal_residual(x, b)
            rnorm = np.linalg.norm(np.atleast_2d(r.T), axis=1)
            if k == self.max_refine:
                break
            dx = self.fact.solve(r)
            x = x + dx
            self.last_refinements = k + 1
            step = np.linalg.norm(np.atleast_2d(dx.T), axis=1)
            if np.all(step <= REFINE_STOP * np.linalg.norm(np.atleast_2d(x.T), axis=1)):
                r = self._normal_residual(x, b)
                rnorm = np.linalg.norm(np.atleast_2d(r.T), axis=1)
                break
        if np.all(rnorm <= self.rtol * gnorm):
            return x
        rel = float(np.max(rnorm / np.where(gnorm > 0, gnorm, 1.0)))
        raise ProjectionError(
            f"normal equations close to singular or badly scaled: relative residual "
            f"{rel:.3e} > {self.rtol:g}", context=self.context)
