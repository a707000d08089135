import math

import numpy as np
import pytest

from lrwi.errors import ConfigError
from lrwi.grid import Grid2D, Rank2Model, SlownessModel
from lrwi.helmholtz import laplacian
from lrwi.penalty import (PenaltyConfig, estimate_mu1, estimate_mu2, make_penalties,
                          schedule_step)

from conftest import small_problem


def test_mu1_matches_dense_eigenvalue():
    pb, _, m0 = small_problem(n=6, ns=1, nr=4, freqs=(2.0,))
    A = pb.helmholtz(m0.values, 2.0).toarray()
    P = pb.P.toarray()
    Ainv = np.linalg.inv(A)
    ref = np.linalg.eigvalsh(Ainv.conj().T @ P.T @ P @ Ainv)[-1]
    assert estimate_mu1(m0, 2.0, pb.P, pb.bc_slowness) == pytest.approx(ref, rel=1e-3)


def test_mu2_matches_dense_blocks():
    g = Grid2D(5, 6, 0.1, 0.1)
    rng = np.random.default_rng(0)
    r2 = Rank2Model(g, rng.uniform(0.1, 0.3, g.n), rng.uniform(0.1, 0.3, g.n), 0.4)
    f, lam = 2.0, 0.3
    L = laplacian(g, 2 * math.pi * f, np.full(g.n, 0.25))
    P = np.zeros((3, g.n))
    P[[0, 1, 2], [1, 7, 20]] = 1.0
    w2 = (2 * math.pi * f) ** 2
    a = (math.sin(r2.theta), math.cos(r2.theta))
    A = [a[0] * L.toarray() + w2 * np.diag(r2.m1), a[1] * L.toarray() + w2 * np.diag(r2.m2)]
    m = (r2.m1, r2.m2)
    ref = max(np.linalg.norm(np.diag(lam * A[i].conj().T @ A[j] + a[i] * a[j] * P.T @ P))
              / np.linalg.norm(m[i] * m[j]) for i in range(2) for j in range(2))
    assert estimate_mu2(r2, lam, f, P, L) == pytest.approx(ref, rel=1e-12)


def test_mu1_scales_with_receiver_count():
    # more receivers can only increase the largest eigenvalue
    g = Grid2D(6, 6, 0.1, 0.1)
    m = SlownessModel(g, np.full(g.n, 0.25))
    few = np.zeros((2, g.n))
    few[[0, 1], [3, 4]] = 1
    more = np.zeros((4, g.n))
    more[[0, 1, 2, 3], [3, 4, 5, 9]] = 1
    assert estimate_mu1(m, 2.0, more, tol=1e-8) >= estimate_mu1(m, 2.0, few, tol=1e-8) * (1 - 1e-6)


def test_penalties_are_products():
    cfg = make_penalties(1e-3, 1e-6, mu1=2.0, mu2=5.0)
    assert cfg.lam == pytest.approx(2e-3)
    assert cfg.gamma == pytest.approx(5e-6)


@pytest.mark.parametrize("kw", [{"beta1": 0.0}, {"beta2": -1.0}, {"mu1": float("nan")}])
def test_nonpositive_penalties_rejected(kw):
    with pytest.raises(ConfigError):
        make_penalties(**kw)


def test_tiny_beta2_warns():
    with pytest.warns(RuntimeWarning, match="singular"):
        make_penalties(beta2=1e-17)


def test_schedule_step_growth():
    cfg = make_penalties(1e-4, 1e-8, growth1=(1.0, 10.0, 100.0), growth2=2.0)
    b1 = schedule_step(cfg, 1, mu1=3.0)
    assert b1.beta1 == pytest.approx(1e-3) and b1.beta2 == pytest.approx(2e-8)
    assert b1.mu1 == 3.0 and b1.mu2 == cfg.mu2
    # past the end of the list the last factor repeats
    assert schedule_step(cfg, 7).beta1 == pytest.approx(1e-2)
    with pytest.raises(ConfigError):
        schedule_step(cfg, -1)


def test_config_dict_round_trip():
    cfg = make_penalties(1e-4, 1e-8, 2.0, 3.0, growth1=(1.0, 2.0))
    assert PenaltyConfig.from_dict(cfg.to_dict()) == cfg
