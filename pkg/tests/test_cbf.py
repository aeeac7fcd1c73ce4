import numpy as np
import pytest

from certctl.cbf import (BarrierError, StateBarrier, SymmetricBoundBarrier, WallBarrier,
                         barrier_eta, barrier_virtual_terms, pole_place_kb)
from certctl.dynamics import DoubleIntegrator, InvertedPendulum, uncertain_pair


def test_pole_placement():
    np.testing.assert_allclose(pole_place_kb([-1, -2]), [2, 3])
    np.testing.assert_allclose(pole_place_kb([-1]), [1])
    np.testing.assert_allclose(pole_place_kb([-3, -3]), [9, 6])
    with pytest.raises(BarrierError):
        pole_place_kb([-1, 0])
    with pytest.raises(BarrierError):
        pole_place_kb([1])


def test_eta_double_integrator_lower_wall():
    di = DoubleIntegrator()
    b = WallBarrier(0, wall=0.0, side="lower")
    np.testing.assert_allclose(barrier_eta(b, di, [1.0, 2.0]), [1.0, 2.0])
    bp = WallBarrier(0, wall=0.0, side="lower", psi_index=0)
    np.testing.assert_allclose(barrier_eta(bp, di, [1.0, 2.0], np.array([0.5])), [0.5, 2.0])


def test_eta_pendulum_bound():
    b = SymmetricBoundBarrier(0, bound=1.0)
    np.testing.assert_allclose(barrier_eta(b, InvertedPendulum(), [0.5, 0.2]), [0.75, -0.2])


def test_virtual_terms():
    di = DoubleIntegrator()
    b = WallBarrier(0, wall=0.0, side="lower")
    Lf, Lg = barrier_virtual_terms(b, di, [0.3, 0.1])
    assert Lf == 0.0
    np.testing.assert_allclose(Lg, [1.0])
    pair = uncertain_pair(di, "scale", 2.0)
    _, Lg_true = barrier_virtual_terms(b, pair.true_plant, [0.3, 0.1])
    np.testing.assert_allclose(Lg_true, [0.5])

    x = np.array([0.5, 0.2])
    Lf2, LgLf = barrier_virtual_terms(SymmetricBoundBarrier(0, 1.0), InvertedPendulum(), x)
    assert Lf2 == pytest.approx(-2 * 0.2**2 - 2 * 0.5 * 9.8 * np.sin(0.5))
    np.testing.assert_allclose(LgLf, [-1.0])


def test_lower_order_terms_model_independent():
    """Only the r_b-th derivative of B sees the model."""
    pair = uncertain_pair(InvertedPendulum(), "scale", 2.0)
    b = SymmetricBoundBarrier(0, 1.0)
    rng = np.random.default_rng(0)
    for x in pair.nominal_plant.sample_domain(rng, 50):
        np.testing.assert_array_equal(barrier_eta(b, pair.true_plant, x),
                                      barrier_eta(b, pair.nominal_plant, x))


def test_lie_terms_match_finite_differences():
    p = InvertedPendulum()
    b = SymmetricBoundBarrier(0, 1.0)
    rng = np.random.default_rng(1)
    h = 1e-6
    for x in p.sample_domain(rng, 30):
        u = rng.normal(size=1)
        xdot = p.f(x) + p.g(x) @ u
        eta_p = barrier_eta(b, p, x + h * xdot)
        eta_m = barrier_eta(b, p, x - h * xdot)
        Lf2, LgLf = barrier_virtual_terms(b, p, x)
        assert (eta_p[1] - eta_m[1]) / (2 * h) == pytest.approx(Lf2 + LgLf @ u, rel=1e-6, abs=1e-7)
        assert (eta_p[0] - eta_m[0]) / (2 * h) == pytest.approx(barrier_eta(b, p, x)[1], abs=1e-7)


def test_state_barrier_relative_degree_one():
    di = DoubleIntegrator()
    b = StateBarrier(lambda x, psi: 1.0 - x[1], lambda x, psi: np.array([0.0, -1.0]), poles=(-1.0,))
    np.testing.assert_allclose(b.Kb, [1.0])
    Lf, Lg = barrier_virtual_terms(b, di, [0.0, 0.5])
    assert Lf == 0.0
    np.testing.assert_allclose(Lg, [-1.0])


def test_wrong_pole_count():
    with pytest.raises(BarrierError):
        WallBarrier(0, 1.0, poles=(-1.0,))
    with pytest.raises(BarrierError):
        WallBarrier(0, 1.0, side="left")
