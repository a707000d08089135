import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrwi.errors import ShapeError
from lrwi.grid import Grid2D, Rank2Model, SlownessModel, split
from lrwi.objectives import (Rank2Wavefield, build_augmented, fwi_value, fwi_value_grad,
                             lrwi_grads, lrwi_value, lrwi_value_grad, s_rank_deficiency_check,
                             solve_rank2_u, wri_solve_u, wri_value, wri_value_grad)
from lrwi.penalty import estimate_mu1

from conftest import small_problem


def directional_fd(fun, x, d, h):
    return (fun(x + h * d) - fun(x - h * d)) / (2 * h)


@pytest.fixture(scope="module")
def prob8():
    return small_problem(n=8, ns=2, freqs=(3.0,), seed=3)


def test_fwi_gradient_matches_finite_differences(prob8):
    pb, _, m0 = prob8
    g = pb.grid
    _, grad = fwi_value_grad(m0, pb)
    rng = np.random.default_rng(0)
    for _ in range(3):
        d = rng.standard_normal(g.n)
        fd = directional_fd(lambda v: fwi_value(SlownessModel(g, v), pb), m0.values, d, 1e-6)
        assert np.dot(grad, d) == pytest.approx(fd, rel=1e-6)


def test_fwi_zero_at_truth(prob8):
    pb, mt, _ = prob8
    rep, grad = fwi_value_grad(mt, pb)
    assert rep.total <= 1e-25 * max(1.0, np.sum(np.abs(pb.data.values) ** 2))
    assert np.max(np.abs(grad)) <= 1e-10 * np.max(np.abs(fwi_value_grad(
        SlownessModel(mt.grid, mt.values * 1.01), pb)[1]))


@pytest.mark.parametrize("beta1", [1e-4, 1.0])
def test_wri_gradient_matches_finite_differences(prob8, beta1):
    pb, _, m0 = prob8
    g = pb.grid
    lam = beta1 * estimate_mu1(m0, 3.0, pb.P, pb.bc_slowness)
    _, grad = wri_value_grad(m0, lam, pb)
    d = np.random.default_rng(1).standard_normal(g.n)
    fd = directional_fd(lambda v: wri_value(SlownessModel(g, v), lam, pb), m0.values, d, 1e-6)
    assert np.dot(grad, d) == pytest.approx(fd, rel=1e-6)


def test_wri_projection_minimizes(prob8):
    # any perturbation of the projected wavefield raises the objective
    pb, _, m0 = prob8
    lam = 1e-3 * estimate_mu1(m0, 3.0, pb.P, pb.bc_slowness)
    A = pb.helmholtz(m0.values, 3.0)
    U = wri_solve_u(A, pb.P, lam, pb.observed(3.0), pb.sources(3.0))
    base = wri_value(m0, lam, pb, U={3.0: U})
    rng = np.random.default_rng(2)
    for _ in range(3):
        dU = 1e-3 * (rng.standard_normal(U.shape) + 1j * rng.standard_normal(U.shape))
        assert wri_value(m0, lam, pb, U={3.0: U + dU * np.abs(U).max()}) > base


def test_wri_solve_matches_dense_lstsq():
    pb, _, m0 = small_problem(n=6, ns=1, nr=3, freqs=(2.0,))
    A = pb.helmholtz(m0.values, 2.0)
    lam = 0.37
    d = pb.observed(2.0)[:, 0]
    q = pb.sources(2.0)[:, 0]
    u = wri_solve_u(A, pb.P, lam, d, q)
    S = np.vstack([pb.P.toarray(), math.sqrt(lam) * A.toarray()])
    ref = np.linalg.lstsq(S, np.concatenate([d, math.sqrt(lam) * q]), rcond=None)[0]
    assert np.linalg.norm(u - ref) <= 1e-10 * np.linalg.norm(ref)


def _random_rank2(grid, rng, theta=None):
    theta = rng.uniform(0.2, 1.3) if theta is None else theta
    return Rank2Model(grid, rng.uniform(0.1, 0.3, grid.n), rng.uniform(0.1, 0.3, grid.n), theta)


def test_rank2_solve_matches_dense_lstsq():
    pb, _, _ = small_problem(n=6, ns=1, nr=3, freqs=(2.0,))
    g = pb.grid
    r2 = _random_rank2(g, np.random.default_rng(4))
    lam, gamma, omega = 0.5, 0.02, 2 * math.pi * 2.0
    L = pb.laplacian(2.0)
    d = pb.observed(2.0)[:, 0]
    q = pb.sources(2.0)[:, 0]
    u = solve_rank2_u(r2, lam, gamma, d, q, omega, pb.P, L)
    S = build_augmented(r2, lam, gamma, omega, pb.P, L).toarray()
    rhs = np.concatenate([d, math.sqrt(lam) * q, np.zeros(g.n)])
    ref = np.linalg.lstsq(S, rhs, rcond=None)[0]
    got = np.concatenate([u.u1, u.u2])
    assert np.linalg.norm(got - ref) <= 1e-10 * np.linalg.norm(ref)


def test_rank2_objective_matches_augmented_residual():
    pb, _, _ = small_problem(n=6, ns=1, nr=3, freqs=(2.0,))
    g = pb.grid
    rng = np.random.default_rng(5)
    r2 = _random_rank2(g, rng)
    lam, gamma, omega = 0.3, 0.07, 2 * math.pi * 2.0
    L = pb.laplacian(2.0)
    d, q = pb.observed(2.0)[:, 0], pb.sources(2.0)[:, 0]
    u1 = rng.standard_normal(g.n) + 1j * rng.standard_normal(g.n)
    u2 = rng.standard_normal(g.n) + 1j * rng.standard_normal(g.n)
    rep = lrwi_value(r2, Rank2Wavefield(u1, u2), lam, gamma, d, q, omega, pb.P, L)
    S = build_augmented(r2, lam, gamma, omega, pb.P, L)
    rhs = np.concatenate([d, math.sqrt(lam) * q, np.zeros(g.n)])
    expect = 0.5 * np.linalg.norm(S @ np.concatenate([u1, u2]) - rhs) ** 2
    assert rep.total == pytest.approx(expect, rel=1e-12)
    assert rep.total == pytest.approx(rep.data_term + rep.pde_term + rep.rank1_term, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_rank1_reduction_identity(seed):
    pb, _, _ = small_problem(n=6, ns=1, nr=4, freqs=(2.0,))
    g = pb.grid
    rng = np.random.default_rng(seed)
    m = SlownessModel(g, rng.uniform(0.1, 0.3, g.n))
    theta = rng.uniform(-math.pi, math.pi)
    u0 = rng.standard_normal(g.n) + 1j * rng.standard_normal(g.n)
    lam, omega = rng.uniform(0.01, 2.0), 2 * math.pi * 2.0
    L = pb.laplacian(2.0)
    d, q = pb.observed(2.0)[:, 0], pb.sources(2.0)[:, 0]
    fp = wri_value(m, lam, pb, U={2.0: u0[:, None]})
    rep = lrwi_value(split(m, theta), Rank2Wavefield.from_rank1(u0, theta), lam, 1.0,
                     d, q, omega, pb.P, L)
    assert abs(rep.total - fp) <= 1e-12 * (1 + fp)
    assert rep.rank1_term <= 1e-24


def test_swap_symmetry():
    pb, _, _ = small_problem(n=6, ns=1, nr=4, freqs=(2.0,))
    g = pb.grid
    rng = np.random.default_rng(6)
    r2 = _random_rank2(g, rng)
    u = Rank2Wavefield(rng.standard_normal(g.n) + 1j, rng.standard_normal(g.n) - 1j)
    args = (0.4, 0.3, pb.observed(2.0)[:, 0], pb.sources(2.0)[:, 0], 2 * math.pi * 2.0, pb.P,
            pb.laplacian(2.0))
    a = lrwi_value(r2, u, *args).total
    swapped = Rank2Model(g, r2.m2, r2.m1, math.pi / 2 - r2.theta)
    b = lrwi_value(swapped, Rank2Wavefield(u.u2, u.u1), *args).total
    assert b == pytest.approx(a, rel=1e-12)


@pytest.fixture(scope="module")
def rank2_point():
    # generic (non-split) rank-2 point so the angle gradient is nonzero
    pb, _, m0 = small_problem(n=8, ns=2, freqs=(3.0,), seed=7)
    r = split(m0, 0.6)
    rng = np.random.default_rng(8)
    r2 = Rank2Model(pb.grid, r.m1 * (1 + 0.1 * rng.uniform(-1, 1, pb.grid.n)), r.m2, 0.6)
    lam = 1e-2 * estimate_mu1(m0, 3.0, pb.P, pb.bc_slowness)
    return pb, r2, lam


@pytest.mark.parametrize("gamma", [1e-3, 1.0])
def test_lrwi_model_gradient_matches_finite_differences(rank2_point, gamma):
    pb, r2, lam = rank2_point
    n = pb.grid.n
    ev = lrwi_value_grad(r2, lam, gamma, pb)

    def f(x):
        return lrwi_value_grad(Rank2Model(pb.grid, x[:n], x[n:], r2.theta), lam, gamma, pb,
                               need_grad=False).report.total

    d = np.random.default_rng(9).standard_normal(2 * n)
    fd = directional_fd(f, r2.stacked(), d, 1e-6)
    assert np.dot(ev.grad_m, d) == pytest.approx(fd, rel=1e-6)


def test_lrwi_theta_gradient_matches_finite_differences(rank2_point):
    pb, r2, lam = rank2_point
    ev = lrwi_value_grad(r2, lam, 0.1, pb)
    assert ev.grad_theta != 0

    def f(t):
        return lrwi_value_grad(Rank2Model(pb.grid, r2.m1, r2.m2, t), lam, 0.1, pb,
                               need_grad=False).report.total

    fd = (f(r2.theta + 1e-6) - f(r2.theta - 1e-6)) / 2e-6
    assert ev.grad_theta == pytest.approx(fd, rel=1e-6)


def test_lrwi_consistent_minimum_is_zero():
    pb, mt, _ = small_problem(n=8, ns=2, freqs=(3.0,))
    lam = 1e-2 * estimate_mu1(mt, 3.0, pb.P, pb.bc_slowness)
    ev = lrwi_value_grad(split(mt, math.pi / 4), lam, 1e-3, pb)
    scale = np.sum(np.abs(pb.data.values) ** 2)
    assert ev.report.total <= 1e-20 * scale
    assert ev.projection_residual <= 1e-8


def test_lrwi_grads_shape_check():
    g = Grid2D(4, 4, 0.1, 0.1)
    with pytest.raises(ShapeError):
        Rank2Wavefield(np.zeros(g.n), np.zeros(g.n + 1))


def test_s_is_underdetermined_without_rank1_block():
    pb, _, _ = small_problem(n=4, ns=1, nr=3, freqs=(2.0,))
    g = pb.grid
    r2 = _random_rank2(g, np.random.default_rng(10))
    rank, nullity = s_rank_deficiency_check(r2, 1.0, 2 * math.pi * 2.0, pb.P, pb.laplacian(2.0))
    assert rank <= g.n + 3
    assert nullity >= g.n - 3
    rank, nullity = s_rank_deficiency_check(r2, 1.0, 2 * math.pi * 2.0, pb.P,
                                            pb.laplacian(2.0), gamma=1.0)
    assert nullity == 0


def test_lrwi_gradient_sums_over_sources_and_frequencies():
    pb, _, m0 = small_problem(n=6, ns=2, freqs=(2.0, 3.0))
    r2 = split(m0, 0.7)
    total = lrwi_value_grad(r2, 0.1, 0.01, pb)
    parts = [lrwi_value_grad(r2, 0.1, 0.01, pb.restrict([f])) for f in (2.0, 3.0)]
    assert total.report.total == pytest.approx(sum(p.report.total for p in parts), rel=1e-12)
    np.testing.assert_allclose(total.grad_m, parts[0].grad_m + parts[1].grad_m, rtol=1e-10,
                               atol=1e-14 * np.abs(total.grad_m).max())
    assert len(total.report.breakdown) == 4
