import numpy as np
import pytest

from lrwi.acquisition import Geometry, SourceSpectrum, forward_model
from lrwi.grid import Grid2D, SlownessModel, make_synthetic, velocity_to_slowness
from lrwi.objectives import Problem


def two_layer(grid, v_top=2.0, v_bottom=2.6):
    z_mid = grid.extent[1] / 2
    return velocity_to_slowness(make_synthetic("layered", grid, {"layers": [(0.0, v_top),
                                                                          (z_mid, v_bottom)]}))


def small_problem(n=15, ns=2, nr=None, freqs=(2.0,), h=0.1, seed=0):
    """Inverse-crime problem on an ``n x n`` grid with a two-layer truth.

    Returns ``(problem, m_true, m_start)``. The start model is a smooth
    random perturbation of the truth, so gradients are generic.
    """
    g = Grid2D(n, n, h, h)
    m_true = two_layer(g)
    nr = n - 2 if nr is None else nr
    geom = Geometry.line(g, ns, nr, h, margin=h)
    spec = SourceSpectrum(15.0)
    bc = np.full(g.n, 0.25)
    data = forward_model(m_true, geom, freqs, spec, bc)
    rng = np.random.default_rng(seed)
    m0 = SlownessModel(g, m_true.values * (1 + 0.05 * rng.uniform(-1, 1, g.n)))
    return Problem(geom, data, spec, bc), m_true, m0


@pytest.fixture
def problem15():
    return small_problem()


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
