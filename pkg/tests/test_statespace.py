import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rslkit import kernels as K
from rslkit import statespace as ss
from rslkit.errors import (ConfigurationError, DegeneracyError, NumericError, SmootherInstabilityError)
from rslkit.kernels import Points

from .conftest import batch_state_posterior, block_diag_cov, joint_gaussian_condition, mvn_logpdf


def test_scalar_update_example(backend):
    m = ss.random_walk_model(0.0, 1.0, 0.0, 1.0)
    f = ss.kalman_filter(m, [1.0], backend)
    assert f.mean[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert f.cov[0, 0, 0] == pytest.approx(0.5, abs=1e-15)


def test_no_observations_is_pure_prediction(backend):
    Phi = np.array([[1.0, 1.0], [0.0, 0.9]])
    m = ss.StateSpaceModel(Phi, 0.1 * np.eye(2), np.eye(2), np.eye(2), np.array([1.0, 2.0]), np.eye(2))
    f = ss.kalman_filter(m, np.full((6, 2), np.nan), backend)
    x, P = m.x0, m.P0
    for k in range(6):
        if k:
            x, P = Phi @ x, Phi @ P @ Phi.T + m.Q
        np.testing.assert_allclose(f.mean[k], x, rtol=1e-14)
        np.testing.assert_allclose(f.cov[k], P, rtol=1e-14)
    assert f.loglik == 0.0


def test_three_step_filter_matches_dense_solve(backend):
    m = ss.StateSpaceModel(np.array([[0.9]]), np.array([[0.3]]), np.array([[1.0]]), np.array([[0.2]]),
                           np.array([0.5]), np.array([[2.0]]))
    Z = np.array([[0.1], [1.3], [0.7]])
    f = ss.kalman_filter(m, Z, backend)
    for k in range(3):
        # filtered moments at step k only see observations up to k
        mean, cov, _ = batch_state_posterior(m, np.vstack([Z[:k + 1], np.full((2 - k, 1), np.nan)]))
        assert f.mean[k, 0] == pytest.approx(mean[k, 0], abs=1e-10)
        assert f.cov[k, 0, 0] == pytest.approx(cov[k, k], abs=1e-10)


def test_loglik_is_marginal_density(backend):
    rng = np.random.default_rng(0)
    m = ss.random_walk_model(0.2, 0.5, 0.3, 1.5)
    _, Z = ss.simulate(m, 15, rng, missing=0.2)
    _, _, (y, my, Cy) = batch_state_posterior(m, Z)
    assert ss.kalman_filter(m, Z, backend).loglik == pytest.approx(mvn_logpdf(y, my, Cy), abs=1e-9)


def test_random_walk_smoother_equals_brownian_gp(backend):
    q, r, p0 = 0.4, 0.25, 1e-2
    rng = np.random.default_rng(1)
    m = ss.random_walk_model(q, r, 0.0, p0)
    _, Z = ss.simulate(m, 50, rng)
    res = ss.kalman_smooth(m, Z, backend)
    t = Points(np.arange(50.0))
    # start the Wiener process early enough that Var(x_0) = p0
    kern = K.Brownian(q, -p0 / q)
    G = kern.gram(t)
    mean, cov = joint_gaussian_condition(G, G, G + r * np.eye(50), Z[:, 0])
    np.testing.assert_allclose(res.mean[:, 0], mean, rtol=0, atol=1e-6)
    np.testing.assert_allclose(res.cov[:, 0, 0], np.diag(cov), rtol=0, atol=1e-6)


def test_final_step_observation_with_deterministic_dynamics(backend):
    m = ss.random_walk_model(0.0, 0.1, 0.0, 1.0)
    Z = np.full((10, 1), np.nan)
    Z[-1] = 2.2
    res = ss.kalman_smooth(m, Z, backend)
    want = 2.2 * 1.0 / 1.1
    np.testing.assert_allclose(res.mean[:, 0], want, rtol=1e-12)
    np.testing.assert_allclose(res.cov[:, 0, 0], 1.0 - 1.0 / 1.1, rtol=1e-12)


def test_gap_variance_below_prediction_only(backend):
    m = ss.random_walk_model(0.1, 0.05, 0.0, 1.0)
    Z = np.sin(np.arange(30.0))[:, None]
    Z[10:20] = np.nan
    res = ss.kalman_smooth(m, Z, backend)
    f = ss.kalman_filter(m, Z, backend)
    _, cov, _ = batch_state_posterior(m, Z)
    np.testing.assert_allclose(res.cov[:, 0, 0], np.diag(cov), rtol=1e-9)
    assert np.all(res.cov[10:20, 0, 0] < f.cov[10:20, 0, 0])


@st.composite
def linear_models(draw):
    n = draw(st.integers(1, 6))
    m = draw(st.integers(1, 3))
    steps = draw(st.integers(1, 30))
    seed = draw(st.integers(0, 10**6))
    rng = np.random.default_rng(seed)
    Phi = rng.normal(0, 0.5, (n, n)) + 0.5 * np.eye(n)
    # keep dynamics non-explosive so the dense oracle stays well conditioned
    Phi /= max(1.0, np.abs(np.linalg.eigvals(Phi)).max())
    A = rng.normal(size=(n, n))
    Q = 0.1 * A @ A.T + 1e-3 * np.eye(n)
    H = rng.normal(size=(m, n))
    Bm = rng.normal(size=(m, m))
    R = 0.2 * Bm @ Bm.T + 0.05 * np.eye(m)
    C = rng.normal(size=(n, n))
    P0 = C @ C.T + 0.1 * np.eye(n)
    B = rng.normal(size=(n, 2))
    u = rng.normal(size=(steps, 2))
    model = ss.StateSpaceModel(Phi, Q, H, R, rng.normal(size=n), P0, B, u)
    _, Z = ss.simulate(model, steps, rng, missing=draw(st.sampled_from([0.0, 0.3])))
    return model, Z


@settings(max_examples=60, deadline=None)
@given(linear_models())
def test_smoother_matches_batch_solve(mz):
    m, Z = mz
    res = ss.kalman_smooth(m, Z)
    mean, cov, _ = batch_state_posterior(m, Z)
    P = block_diag_cov(cov, Z.shape[0], m.n_state)
    np.testing.assert_allclose(res.mean, mean, rtol=0, atol=1e-8 * max(1.0, np.abs(mean).max()))
    np.testing.assert_allclose(res.cov, P, rtol=0, atol=1e-8 * max(1.0, np.abs(P).max()))
    # smoothed never above filtered, in PSD order
    Pf = res.filtered[0].cov
    for k in range(Z.shape[0]):
        assert np.linalg.eigvalsh(Pf[k] - res.cov[k]).min() >= -1e-10 * max(1.0, np.abs(Pf[k]).max())
        assert np.linalg.eigvalsh(res.cov[k]).min() >= -1e-10


def test_singular_innovation_names_step(backend):
    m = ss.StateSpaceModel(np.eye(1), np.zeros((1, 1)), np.eye(1), np.zeros((1, 1)), np.zeros(1),
                           np.zeros((1, 1)))
    with pytest.raises(NumericError, match="step 0"):
        ss.kalman_filter(m, [[1.0], [1.0]], backend)


def test_backward_failure_reports_step(backend):
    # singular R is fine forward (P0 > 0) but cannot be whitened backward
    m = ss.StateSpaceModel(np.eye(1), np.array([[0.1]]), np.eye(1), np.zeros((1, 1)), np.zeros(1), np.eye(1))
    with pytest.raises(SmootherInstabilityError) as e:
        ss.kalman_smooth(m, [[1.0], [np.nan], [2.0]], backend)
    assert e.value.step_range == (2, 2)


def test_model_validation():
    with pytest.raises(ConfigurationError):
        ss.StateSpaceModel(np.eye(2), np.eye(2), np.eye(2), np.eye(2), np.zeros(3), np.eye(2))
    with pytest.raises(ConfigurationError):
        ss.StateSpaceModel(np.eye(1), -np.eye(1), np.eye(1), np.eye(1), np.zeros(1), np.eye(1))
    with pytest.raises(ConfigurationError):
        ss.StateSpaceModel(np.eye(2), np.array([[1.0, 0.5], [0.0, 1.0]]), np.eye(2), np.eye(2), np.zeros(2),
                           np.eye(2))
    with pytest.raises(ConfigurationError):
        ss.kalman_filter(ss.random_walk_model(1, 1), np.zeros((3, 2)))


def test_two_identical_models():
    rng = np.random.default_rng(2)
    m = ss.random_walk_model(0.1, 0.2)
    _, Z = ss.simulate(m, 40, rng)
    one = ss.kalman_smooth(m, Z)
    both = ss.multi_model_smooth([m, m], Z)
    np.testing.assert_allclose(both.weights, [0.5, 0.5], rtol=1e-15)
    np.testing.assert_allclose(both.mean, one.mean, rtol=1e-13)
    np.testing.assert_allclose(both.cov, one.cov, rtol=1e-13)
    single = ss.multi_model_smooth([m], Z)
    np.testing.assert_array_equal(single.mean, one.mean)
    np.testing.assert_array_equal(single.cov, one.cov)


def test_mixture_moments_and_covariance_ordering():
    rng = np.random.default_rng(3)
    base = ss.random_walk_model(0.05, 0.3)
    _, Z = ss.simulate(base, 30, rng)
    B = np.eye(1)
    a = ss.StateSpaceModel(base.Phi, base.Q, base.H, base.R, base.x0, base.P0, B, np.full((30, 1), 0.01))
    b = ss.StateSpaceModel(base.Phi, base.Q, base.H, base.R, base.x0, base.P0, B, np.full((30, 1), -0.01))
    mix = ss.multi_model_smooth([a, b], Z)
    ra, rb = ss.kalman_smooth(a, Z), ss.kalman_smooth(b, Z)
    la, lb = ra.loglik[0], rb.loglik[0]
    wa = 1.0 / (1.0 + math.exp(lb - la))
    assert mix.weights[0] == pytest.approx(wa, rel=1e-12)
    assert 0.01 < wa < 0.99
    mean = wa * ra.mean + (1 - wa) * rb.mean
    np.testing.assert_allclose(mix.mean, mean, rtol=1e-12)
    # equal per-model covariances, so the spread term only adds
    assert np.all(mix.cov[:, 0, 0] >= ra.cov[:, 0, 0] - 1e-15)
    assert np.any(mix.cov[:, 0, 0] > ra.cov[:, 0, 0])


def test_weights_degenerate():
    with pytest.raises(DegeneracyError):
        ss.model_weights([-np.inf, -np.inf])
    w = ss.model_weights([-1e6, 0.0, -np.inf])
    assert w[1] == 1.0 and w.sum() == 1.0


def test_decoy_with_wrong_q_loses_weight():
    rng = np.random.default_rng(4)
    wins = 0
    for _ in range(10):
        a = ss.random_walk_model(0.01, 0.05)
        decoy = ss.random_walk_model(0.1, 0.05)
        _, Z = ss.simulate(a, 200, rng)
        wins += ss.multi_model_smooth([a, decoy], Z).weights[0] >= 0.9
    assert wins >= 9


def test_zero_melt_gives_zero_gmsl():
    m = ss.fingerprint_model(np.array([[1.0, 0.5], [0.8, 1.2]]), q_rate=0.0)
    res = ss.kalman_smooth(m, np.zeros((20, 2)))
    g = res.gmsl()
    np.testing.assert_allclose(g.mean, 0.0, atol=1e-14)


@pytest.mark.parametrize("with_state", [True, False])
def test_constant_melt_integrates(with_state):
    F = np.array([[1.0, 0.5], [0.8, 1.2]])
    m = ss.fingerprint_model(F, q_rate=0.0, q_local=1e-6)
    x0 = np.zeros(m.n_state)
    x0[2:4] = [0.001, 0.002]
    P0 = np.zeros((m.n_state, m.n_state))
    m = ss.fingerprint_model(F, q_rate=0.0, x0=x0, P0=P0)
    res = ss.kalman_smooth(m, np.full((101, 2), np.nan))
    if with_state:
        g = ss.gmsl_from_state(res, m.layout)
    else:
        lay = ss.StateLayout(m.layout.sites, m.layout.sources, False)
        keep = list(range(4))
        res = ss.SmootherResult(res.mean[:, keep], res.cov[:, keep][:, :, keep], res.weights, res.loglik)
        g = ss.gmsl_from_state(res, lay)
    assert g.mean[100] == pytest.approx(0.3, rel=1e-12)
    assert g.mean[0] == 0.0


def gmsl_replicates(reps):
    F = np.array([[1.1, 0.6], [0.9, 1.3], [0.7, 0.8]])
    for seed in range(reps):
        rng = np.random.default_rng(seed)
        m = ss.fingerprint_model(F, q_local=1e-6, q_rate=1e-8, r=1e-5)
        X, Z = ss.simulate(m, 100, rng)
        g = ss.kalman_smooth(m, Z).gmsl()
        yield np.abs(g.mean - X[:, -1]) <= 2 * g.sd + 1e-12


def test_two_source_gmsl_pointwise_two_sigma():
    inside = np.array(list(gmsl_replicates(200)))
    # nominal 0.954; 200 correlated paths leave roughly ±0.015 of Monte-Carlo slack
    assert 0.93 <= inside.mean() <= 0.98


@pytest.mark.xfail(strict=True, reason="a calibrated band holds at every one of 100 steps in only about 75% of paths")
def test_two_source_gmsl_all_steps_two_sigma():
    inside = np.array(list(gmsl_replicates(40)))
    assert inside.all(axis=1).mean() >= 0.95


def test_fingerprint_model_layout():
    m = ss.fingerprint_model(np.ones((3, 2)), dt=2.0, gia=[0.001, 0.0, -0.001], n_steps=5)
    assert m.layout.n_state == 6 and m.layout.gmsl_index == 5
    np.testing.assert_allclose(m.controls(5)[1, :3], [0.002, 0.0, -0.002])
    assert m.Phi[5, 3] == 2.0
    with pytest.raises(ConfigurationError):
        ss.fingerprint_model(np.ones((3, 2)), gia=[0.0, 0.0, 0.0])
