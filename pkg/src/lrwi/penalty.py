"""Scale-free penalty selection: ``lambda = beta1*mu1`` and ``gamma = beta2*mu2``."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, replace

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DomainError
from .linalg import factorize, power_iteration

DEFAULT_BETA1 = 1e-8
DEFAULT_BETA2 = 1e-12
# below this beta2 the normal matrix S~^H S~ tends to be numerically singular
NEAR_SINGULAR_BETA2 = 1e-16


def mu1_from_matrix(A, P, tol=1e-4, max_iter=1000, seed=0):
    """Largest eigenvalue of ``A^-H P^T P A^-1`` by matrix-free power iteration."""
    fact = factorize(A)
    P = sp.csr_matrix(P)
    PtP = (P.T @ P).tocsr()
    return power_iteration(lambda x: fact.solve(PtP @ fact.solve(x), trans="H"),
                           A.shape[0], max_iter=max_iter, tol=tol, seed=seed)


def estimate_mu1(m0, f, P, bc_slowness=None, **kw):
    """``mu1`` for the Helmholtz matrix of model ``m0`` at frequency ``f``."""
    from .helmholtz import assemble

    return mu1_from_matrix(assemble(m0, f, bc_slowness).matrix, P, **kw)


def _col_inner_diag(Ai, Aj):
    # diag(Ai^H Aj) = column sums of conj(Ai) * Aj
    prod = sp.csc_matrix(Ai).conj().multiply(sp.csc_matrix(Aj))
    return np.asarray(prod.sum(axis=0)).ravel()


def mu2_from_blocks(A1, A2, m1, m2, alpha1, alpha2, lam, P):
    """Max over (i, j) of ``||diag(T_ij)|| / ||m_i * m_j||``.

    ``T_ij = lam A_i^H A_j + alpha_i alpha_j P^T P``; only the diagonal of each
    product is formed.
    """
    A = (A1, A2)
    m = (np.asarray(m1, dtype=float), np.asarray(m2, dtype=float))
    alpha = (alpha1, alpha2)
    P = sp.csc_matrix(P)
    ptp = np.asarray(P.multiply(P).sum(axis=0)).ravel()
    best = 0.0
    for i in range(2):
        for j in range(2):
            den = np.linalg.norm(m[i] * m[j])
            if den == 0:
                raise DomainError(f"||m{i + 1} * m{j + 1}|| vanishes; mu2 undefined")
            diag = lam * _col_inner_diag(A[i], A[j]) + alpha[i] * alpha[j] * ptp
            best = max(best, float(np.linalg.norm(diag) / den))
    return best


def estimate_mu2(r2, lam, f, P, L):
    """``mu2`` for the rank-2 model ``r2`` with ``L`` the boundary-closed Laplacian."""
    if not lam > 0:
        raise DomainError("lambda must be positive")
    omega = 2 * math.pi * f
    a1, a2 = math.sin(r2.theta), math.cos(r2.theta)
    A1 = a1 * L + sp.diags(omega**2 * r2.m1)
    A2 = a2 * L + sp.diags(omega**2 * r2.m2)
    return mu2_from_blocks(A1, A2, r2.m1, r2.m2, a1, a2, lam, P)


@dataclass(frozen=True)
class PenaltyConfig:
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    mu1: float = 1.0
    mu2: float = 1.0
    growth1: object = 1.0
    growth2: object = 1.0

    @property
    def lam(self):
        return self.beta1 * self.mu1

    @property
    def gamma(self):
        return self.beta2 * self.mu2

    def to_dict(self):
        d = asdict(self)
        for k in ("growth1", "growth2"):
            if isinstance(d[k], (list, tuple)):
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("growth1", "growth2"):
            if isinstance(d.get(k), list):
                d[k] = tuple(d[k])
        return cls(**d)


def make_penalties(beta1=DEFAULT_BETA1, beta2=DEFAULT_BETA2, mu1=1.0, mu2=1.0,
                   growth1=1.0, growth2=1.0) -> PenaltyConfig:
    for name, val in (("beta1", beta1), ("beta2", beta2), ("mu1", mu1), ("mu2", mu2)):
        if not (np.isfinite(val) and val > 0):
            raise ConfigError(f"{name} must be positive and finite, got {val}")
    if beta2 <= NEAR_SINGULAR_BETA2:
        warnings.warn(f"beta2 = {beta2:g}: the rank-2 normal matrix is likely close to "
                      "singular or badly scaled", RuntimeWarning, stacklevel=2)
    return PenaltyConfig(float(beta1), float(beta2), float(mu1), float(mu2), growth1, growth2)


def _factor(growth, band_index):
    if isinstance(growth, (list, tuple)):
        return float(growth[min(band_index, len(growth) - 1)])
    return float(growth)


def schedule_step(cfg: PenaltyConfig, band_index: int, mu1=None, mu2=None) -> PenaltyConfig:
    """Advance the penalties into band ``band_index``.

    Multiplies ``(beta1, beta2)`` by that band's growth factors and swaps in
    the stage's ``mu`` estimates when given.
    """
    if band_index < 0:
        raise ConfigError("band index must be nonnegative")
    return replace(cfg,
                   beta1=cfg.beta1 * _factor(cfg.growth1, band_index),
                   beta2=cfg.beta2 * _factor(cfg.growth2, band_index),
                   mu1=cfg.mu1 if mu1 is None else float(mu1),
                   mu2=cfg.mu2 if mu2 is None else float(mu2))
