import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fp4sim.analysis import (
    SQRT3,
    CurvatureModel,
    MonitorState,
    biased_fixed_point,
    descent_bound,
    expected_loss_delta,
    loss_delta_at_optimum,
    monitor_step,
    noise_ratio,
    noise_sensitivity,
    optimal_eta,
    sensitivity_from_terms,
    sigma_critical,
    sigma_critical_general,
)
from fp4sim.blockquant import NVFP4
from fp4sim.rounding import RngStream

# A = |g|^2 = 2, X = g^T H g = 3, Y = tr H = 1
G_XY = np.array([math.sqrt(2.0), 0.0])
H_XY = CurvatureModel.diagonal([1.5, -0.5])


def random_instance(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 30))
    M = rng.standard_normal((d, d))
    H = CurvatureModel.explicit(M @ M.T / d + 0.1 * np.eye(d))
    return rng.standard_normal(d), H, float(rng.uniform(0, 2))


def test_newton_decrement():
    g = np.array([3.0, -4.0])
    H = CurvatureModel.isotropic(2.0)
    assert expected_loss_delta(g, H, 0.5, 0.0) == -25 / 4
    assert loss_delta_at_optimum(g, H, 0.0) == -25 / 4
    assert optimal_eta(g, H, 0.0) == 0.5


def test_pure_noise_penalty():
    H = CurvatureModel.diagonal([1.0, 2.0, 3.0])
    assert expected_loss_delta(np.zeros(3), H, 0.2, 0.5) == pytest.approx(0.5 * 0.04 * 0.25 * 6)


def test_symbolic_instance():
    assert optimal_eta(G_XY, H_XY, 1.0) == pytest.approx(0.5, abs=1e-15)
    assert loss_delta_at_optimum(G_XY, H_XY, 1.0) == pytest.approx(-0.5, abs=1e-15)
    etas = np.linspace(0, 1, 100_001)
    vals = [expected_loss_delta(G_XY, H_XY, e, 1.0) for e in etas[::100]]
    assert etas[::100][int(np.argmin(vals))] == pytest.approx(0.5, abs=1e-3)


def test_monte_carlo_oracle():
    d, lam, eta, sig = 10, 2.0, 0.1, 0.1
    g = np.zeros(d)
    g[0] = 1.0
    H = CurvatureModel.isotropic(lam)
    eps = np.random.default_rng(0).standard_normal((100_000, d)) * sig
    # quadratic L(theta) = lam/2 |theta|^2 with grad g at theta = g / lam
    theta = g / lam
    after = theta - eta * (g + eps)
    deltas = 0.5 * lam * (after ** 2).sum(axis=1) - 0.5 * lam * theta @ theta
    se = deltas.std() / math.sqrt(deltas.size)
    assert abs(deltas.mean() - expected_loss_delta(g, H, eta, sig)) < 3 * se


@pytest.mark.parametrize("seed", range(20))
def test_identities_random(seed):
    g, H, sig = random_instance(seed)
    eta = optimal_eta(g, H, sig)
    assert loss_delta_at_optimum(g, H, sig) == pytest.approx(expected_loss_delta(g, H, eta, sig), rel=1e-12)
    for bump in (0.99, 1.01):
        assert expected_loss_delta(g, H, eta * bump, sig) > expected_loss_delta(g, H, eta, sig)
    assert expected_loss_delta(g, H, descent_bound(g, H, sig), sig) == pytest.approx(0.0, abs=1e-9)


def test_eta_decreases_with_noise():
    g = np.ones(4)
    H = CurvatureModel.isotropic(1.0)
    etas = [optimal_eta(g, H, s) for s in np.linspace(0, 100, 50)]
    assert np.all(np.diff(etas) < 0)
    assert etas[-1] < 1e-3


def test_errors():
    with pytest.raises(ValueError):
        expected_loss_delta(np.ones(2), CurvatureModel.isotropic(1), -0.1, 0.0)
    with pytest.raises(ValueError):
        optimal_eta(np.zeros(2), CurvatureModel.isotropic(1), 0.0)
    with pytest.raises(ValueError):
        CurvatureModel.isotropic(0.0)
    with pytest.raises(ValueError):
        CurvatureModel.explicit(np.eye(600))
    with pytest.raises(ValueError):
        sigma_critical(1.0, 0)


def test_sensitivity_argmax_grid():
    sig = np.linspace(0, 10, 100_001)
    f = sensitivity_from_terms(3.0, 1.0, 4.0, sig)
    assert sig[np.argmax(f)] == pytest.approx(1.0, abs=1e-4)
    df = np.diff(f)
    assert np.all(df[sig[1:] < 0.999] > 0)
    assert np.all(df[sig[:-1] > 1.001] < 0)
    assert noise_sensitivity(G_XY, H_XY, 0.0) == 0.0
    assert noise_sensitivity(G_XY, H_XY, 1.0) == pytest.approx(4 * 1 / 16)


def test_sensitivity_is_derivative_of_optimum():
    g, H, sig = random_instance(3)
    h = 1e-6
    fd = (loss_delta_at_optimum(g, H, sig + h) - loss_delta_at_optimum(g, H, sig - h)) / (2 * h)
    assert fd == pytest.approx(noise_sensitivity(g, H, sig), rel=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(1, 10_000), st.floats(0.1, 10))
def test_threshold_consistency(sigma, d, lam):
    grad_norm = math.sqrt(3 * d) * sigma
    assert sigma_critical(grad_norm, d) == pytest.approx(sigma, rel=1e-12)
    assert noise_ratio(grad_norm, sigma, d) == pytest.approx(SQRT3, rel=1e-12)
    g = np.full(d, grad_norm / math.sqrt(d))
    assert sigma_critical_general(g, CurvatureModel.isotropic(lam)) == pytest.approx(sigma, rel=1e-12)


def test_threshold_edges():
    assert sigma_critical(0.0, 5) == 0.0
    assert noise_ratio(1.0, 0.0, 5) == math.inf


def test_biased_fixed_point_examples():
    e_n, L_n, e_inf, L_inf = biased_fixed_point(1.0, 0.1, 0.1, 2.0, 0)
    assert e_n == 2.0 and L_n == 2.0
    assert e_inf == pytest.approx(-0.1) and L_inf == pytest.approx(0.005)
    assert biased_fixed_point(1.0, 0.1, 0.0, 2.0, 10)[2:] == (0.0, 0.0)
    with pytest.raises(ValueError):
        biased_fixed_point(1.0, 2.0, 0.1, 1.0, 5)


@pytest.mark.parametrize("lam,eta,mu,e0", [(1.0, 0.1, 0.1, 1.0), (3.0, 0.5, -0.2, -2.0), (0.5, 3.0, 0.05, 0.3)])
def test_biased_closed_form_matches_recursion(lam, eta, mu, e0):
    e = e0
    for n in range(60):
        e_n = biased_fixed_point(lam, eta, mu, e0, n)[0]
        assert e_n == pytest.approx(e, rel=1e-10, abs=1e-14)
        e = (1 - eta * lam) * e - eta * mu


def test_monitor_calibration():
    rng = np.random.default_rng(0)
    g = rng.standard_normal(100_000) * 0.01
    noisy = g + rng.standard_normal(g.size) * 0.3
    rep = monitor_step(g, None, None, RngStream(0), MonitorState(), noisy_grad=noisy)
    assert rep.sigma_q == pytest.approx(0.3, rel=0.05)
    assert rep.d == g.size
    assert rep.ratio == pytest.approx(rep.grad_norm / (rep.sigma_q * math.sqrt(rep.d)))


def test_monitor_quantized_estimate_and_subsample():
    g = np.random.default_rng(1).standard_normal(200_000)
    s1 = MonitorState()
    r1 = monitor_step(g, NVFP4, None, RngStream(4), s1)
    r2 = monitor_step(g, NVFP4, None, RngStream(4), MonitorState())
    assert r1 == r2
    assert 0 < r1.sigma_q < 1
    assert s1.step == 1


def test_monitor_zero_grad_then_noise():
    state = MonitorState()
    r0 = monitor_step(np.zeros(32), NVFP4, None, RngStream(0), state)
    assert r0.ratio == math.inf and not r0.crossed and math.isnan(r0.ema)
    r1 = monitor_step(np.zeros(32), None, None, RngStream(0), state, noisy_grad=np.tile([0.1, -0.1], 16))
    assert r1.ratio == 0.0 and r1.crossed and r1.step == 1


def test_monitor_ema():
    state = MonitorState()
    g = np.ones(4)
    ratios = []
    for noise in (0.1, 1.0, 2.0):
        rep = monitor_step(g, None, 4, None, state, noisy_grad=g + noise * np.array([1, -1, 1, -1]))
        ratios.append(rep.ratio)
    expected = ratios[0]
    for r in ratios[1:]:
        expected = 0.9 * expected + 0.1 * r
    assert rep.ema == pytest.approx(expected)
    assert rep.crossed == (expected < SQRT3)
    assert rep.sigma_critical == pytest.approx(2 / math.sqrt(12))
