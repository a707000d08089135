"""Discrete Helmholtz operator ``A(m) = L + omega^2 diag(m)``.

``L`` is the 5-point Laplacian closed by a first-order radiating condition.
Time dependence is ``exp(-i omega t)``, so an outgoing wave obeys
``du/dn = +i omega sqrt(m) u`` on the boundary (``n`` the outward normal).
The condition is imposed through a ghost node beyond each edge,
``(u_ghost - u_b)/h = i omega sqrt(m_bc) u_b``, which is then eliminated from
the boundary node's stencil. The result is complex symmetric, so sources and
receivers are reciprocal.

``m_bc`` (the impedance slowness of the boundary rows) is held fixed while
``m`` varies: ``L`` depends on frequency but not on the model being inverted,
and every row of ``A`` is affine in ``m`` with slope ``omega^2``.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DomainError
from .grid import Grid2D, SlownessModel
from .linalg import factorize

MIN_POINTS_PER_WAVELENGTH = 6.0


def laplacian(grid: Grid2D, omega: float, bc_slowness) -> sp.csr_matrix:
    """Laplacian with the radiating boundary closure at angular frequency ``omega``."""
    nx, nz, dx, dz = grid.nx, grid.nz, grid.dx, grid.dz
    sbc = np.sqrt(np.broadcast_to(np.asarray(bc_slowness, dtype=float), (grid.n,)))
    ix, iz = np.meshgrid(np.arange(nx), np.arange(nz))
    ix = ix.ravel()
    iz = iz.ravel()
    idx = np.arange(grid.n)
    diag = np.zeros(grid.n, dtype=complex)
    rows, cols, vals = [], [], []

    for coord, count, h, stride in ((ix, nx, dx, 1), (iz, nz, dz, nx)):
        inv = 1.0 / h**2
        for side, step in ((0, -1), (count - 1, +1)):
            has_nbr = coord != side
            rows.append(idx[has_nbr])
            cols.append(idx[has_nbr] + step * stride)
            vals.append(np.full(has_nbr.sum(), inv, dtype=complex))
            diag[has_nbr] -= inv
            edge = ~has_nbr
            diag[edge] += 1j * omega * sbc[edge] / h

    rows.append(idx)
    cols.append(idx)
    vals.append(diag)
    L = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(grid.n, grid.n))
    return L.tocsr()


@dataclass(frozen=True, eq=False)
class HelmholtzOperator:
    matrix: sp.csr_matrix
    laplacian: sp.csr_matrix
    omega: float
    model_hash: str
    bc: str = "radiating-first-order"


def model_hash(values, f):
    h = hashlib.sha1(np.ascontiguousarray(values, dtype=float).tobytes())
    h.update(repr(float(f)).encode())
    return h.hexdigest()[:16]


def points_per_wavelength(m: SlownessModel, f: float) -> float:
    vmin = 1.0 / math.sqrt(float(np.max(m.values)))
    return vmin / f / max(m.grid.dx, m.grid.dz)


def assemble(m: SlownessModel, f: float, bc_slowness=None) -> HelmholtzOperator:
    """Assemble ``A(m)`` at frequency ``f`` (Hz).

    ``bc_slowness`` defaults to ``m`` itself; inversions pass a fixed
    reference so that the boundary rows do not depend on the iterate.
    """
    if not f > 0:
        raise DomainError(f"frequency must be positive, got {f}")
    if not isinstance(m, SlownessModel):
        raise DomainError("assemble expects a SlownessModel")
    omega = 2.0 * math.pi * f
    ppw = points_per_wavelength(m, f)
    if ppw < MIN_POINTS_PER_WAVELENGTH:
        warnings.warn(f"only {ppw:.2f} points per wavelength at {f} Hz "
                      f"(< {MIN_POINTS_PER_WAVELENGTH})", RuntimeWarning, stacklevel=2)
    bc = m.values if bc_slowness is None else bc_slowness
    return operator_from_values(m.grid, m.values, omega, bc)


def operator_from_values(grid, values, omega, bc_slowness) -> HelmholtzOperator:
    """Assemble from a raw model vector at angular frequency ``omega``.

    ``values`` may hold any real numbers (used for rank-2 components).
    """
    L = laplacian(grid, omega, bc_slowness)
    A = (L + sp.diags(omega**2 * np.asarray(values, dtype=float))).tocsr()
    return HelmholtzOperator(A, L, omega, model_hash(values, omega / (2 * math.pi)))


def solve(op: HelmholtzOperator, q, fact=None):
    """Solve ``A u = q``; ``q`` may hold several right-hand sides as columns."""
    if fact is None:
        fact = factorize(op.matrix)
    return fact.solve(q)


def point_source(grid: Grid2D, x: float, z: float, amplitude=1.0):
    """Discrete delta at the node nearest ``(x, z)``, scaled by ``1/(dx dz)``."""
    q = np.zeros(grid.n, dtype=complex)
    k, _ = grid.nearest_node(x, z)
    q[k] = amplitude / (grid.dx * grid.dz)
    return q


def greens_function(r, k):
    """Outgoing free-space solution of ``(Delta + k^2) G = delta`` in 2-D."""
    from scipy.special import hankel1

    return -0.25j * hankel1(0, k * np.asarray(r))
