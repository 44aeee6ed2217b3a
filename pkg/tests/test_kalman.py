import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from finfilt.cir import (
    CirParams,
    YieldObservation,
    loading_jacobians,
    loadings,
    model_yield,
    simulate_factors,
    simulate_panel,
    transition_sample,
)
from finfilt.errors import FilterStepError
from finfilt.kalman import (
    AugmentedState,
    KalmanState,
    QmlOptions,
    augmented_ekf_step,
    correct,
    estimate_qml,
    innovation_loglik,
    predict,
    quasi_loglik,
    run_kalman,
    stationary_state,
)

ONE = CirParams(1.0, 0.05, 0.1, 0.0, 1e-3)
TWO = CirParams([0.5, 1.5], [0.03, 0.02], [0.1, 0.08], [-0.05, 0.1], [1e-3, 2e-3, 1.5e-3])
MATS = [0.5, 2.0, 5.0]


def random_instance(rng, K=2, n=3):
    params = CirParams(
        rng.uniform(0.2, 2, K), rng.uniform(0.01, 0.08, K), rng.uniform(0.02, 0.1, K), rng.uniform(-0.1, 0.1, K),
        rng.uniform(1e-4, 5e-3, n),
    )
    A = rng.standard_normal((K, K)) * 0.01
    state = KalmanState(rng.uniform(0.0, 0.08, K), A @ A.T + 1e-6 * np.eye(K), "predicted")
    mats = np.sort(rng.uniform(0.1, 20, n))
    obs = YieldObservation(1.0, mats, model_yield(params, state.xhat, mats) + rng.normal(0, 3e-3, n))
    return params, state, obs


# predict -------------------------------------------------------------------


def test_predict_fixed_point():
    s = predict(KalmanState([0.05], [[0.0]], "corrected"), ONE)
    assert s.xhat[0] == pytest.approx(0.05, rel=1e-15)
    assert s.stage == "predicted" and s.time == 1.0


def test_predict_variance_formula():
    s = predict(KalmanState([0.05], [[0.0]], "corrected"), ONE)
    e = np.exp(-1.0)
    assert s.v[0, 0] == pytest.approx(0.01 * (1 - e) * (0.025 * (1 - e) + 0.05 * e), rel=1e-14)
    # equals the exact CIR conditional variance from a point mass
    c = 0.01 * (1 - e) / 4
    ref = stats.ncx2(df=4 * 0.05 / 0.01, nc=0.05 * e / c, scale=c).var()
    assert s.v[0, 0] == pytest.approx(ref, rel=1e-12)


def test_predict_stage_checks():
    with pytest.raises(ValueError):
        predict(KalmanState([0.05], [[0.0]], "predicted"), ONE)
    with pytest.raises(ValueError):
        KalmanState([0.05, 0.01], [[1.0, 0.5], [0.0, 1.0]], "corrected")


def test_predict_cross_covariance_decays():
    s = KalmanState([0.03, 0.02], [[1e-4, 3e-5], [3e-5, 2e-4]], "corrected")
    p = predict(s, TWO, dt=0.5)
    assert p.v[0, 1] == pytest.approx(3e-5 * np.exp(-0.5 * 0.5 - 1.5 * 0.5), rel=1e-14)


def test_predict_matches_monte_carlo():
    # gamma-distributed prior with the state's mean and variance; the
    # predicted moments depend on the prior only through those two
    rng = np.random.default_rng(606)
    for _ in range(20):
        k, th, sg = rng.uniform(0.2, 2), rng.uniform(0.01, 0.08), rng.uniform(0.02, 0.15)
        m, var = rng.uniform(0.005, 0.1), rng.uniform(1e-6, 2e-4)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            p = CirParams(k, th, sg, 0.0, 1e-3)
        prior = rng.gamma(m * m / var, var / m, size=1_000_000)
        draws = transition_sample(rng, prior, k, th, sg, 1.0)
        s = predict(KalmanState([m], [[var]], "corrected"), p)
        n = draws.size
        assert abs(draws.mean() - s.xhat[0]) < 3 * draws.std() / np.sqrt(n)
        se_var = np.sqrt((np.mean((draws - draws.mean()) ** 4) - draws.var() ** 2) / n)
        assert abs(draws.var() - s.v[0, 0]) < 3 * se_var


# correct -------------------------------------------------------------------


def test_uninformative_observation():
    params = CirParams(1.0, 0.05, 0.1, 0.0, 1e6)
    s = KalmanState([0.04], [[1e-4]], "predicted")
    obs = YieldObservation(1.0, [1.0, 3.0], [0.07, 0.02])
    c = correct(s, obs, params)
    assert c.xhat[0] == pytest.approx(0.04, abs=1e-12)
    assert c.v[0, 0] == pytest.approx(1e-4, rel=1e-10)


def test_exact_observation_inverts_yield_map():
    params = CirParams(1.0, 0.05, 0.1, 0.0, 1e-8)
    chi, Psi = loadings(params, [2.0])
    obs = YieldObservation(1.0, [2.0], [0.045])
    c = correct(KalmanState([0.05], [[1e-4]], "predicted"), obs, params)
    assert c.xhat[0] == pytest.approx((0.045 - chi[0]) / Psi[0, 0], abs=1e-4)


def test_posterior_covariance_dominated_by_prior():
    rng = np.random.default_rng(5)
    for _ in range(100):
        params, state, obs = random_instance(rng)
        c = correct(state, obs, params)
        assert np.linalg.eigvalsh(state.v - c.v).min() >= -1e-10


def test_information_and_gain_forms_agree():
    rng = np.random.default_rng(6)
    for _ in range(20):
        params, state, obs = random_instance(rng)
        a = correct(state, obs, params, form="information")
        b = correct(state, obs, params, form="gain")
        np.testing.assert_allclose(a.v, b.v, rtol=1e-8, atol=1e-16)
        np.testing.assert_array_equal(a.xhat, b.xhat)


def test_singular_prior_uses_gain_form():
    s = KalmanState([0.04, 0.02], np.zeros((2, 2)), "predicted")
    obs = YieldObservation(1.0, [1.0, 2.0], [0.05, 0.06])
    c = correct(s, obs, TWO)
    np.testing.assert_array_equal(c.xhat, s.xhat)
    np.testing.assert_array_equal(c.v, 0.0)


def test_positive_part_on_mean_only():
    params = CirParams(1.0, 0.05, 0.1, 0.0, 1e-4)
    chi, _ = loadings(params, [1.0])
    obs = YieldObservation(1.0, [1.0], [chi[0] - 0.05])
    prior = KalmanState([0.01], [[1e-4]], "predicted")
    c = correct(prior, obs, params)
    assert c.xhat[0] == 0.0
    g = correct(prior, obs, params, form="gain")
    assert c.v[0, 0] == pytest.approx(g.v[0, 0], rel=1e-10) and c.v[0, 0] > 0


def test_huge_noise_drops_a_maturity():
    rng = np.random.default_rng(8)
    for _ in range(10):
        _, state, _ = random_instance(rng)
        base = CirParams(TWO.k, TWO.theta, TWO.sigma, TWO.lam, [1e-3, 1e12, 2e-3])
        obs = YieldObservation(1.0, [0.5, 2.0, 5.0], rng.uniform(0.01, 0.06, 3))
        dropped = YieldObservation(1.0, [0.5, 5.0], obs.yields[[0, 2]])
        reduced = CirParams(TWO.k, TWO.theta, TWO.sigma, TWO.lam, [1e-3, 2e-3])
        a = correct(state, obs, base)
        b = correct(state, dropped, reduced)
        np.testing.assert_allclose(a.xhat, b.xhat, atol=1e-8)
        np.testing.assert_allclose(a.v, b.v, atol=1e-8)


# innovation log-likelihood ---------------------------------------------------


def test_innovation_at_peak_one_dimensional():
    params = CirParams(1.0, 0.05, 0.1, 0.0, 2e-3)
    s = KalmanState([0.04], [[1e-5]], "predicted")
    y = model_yield(params, [0.04], 3.0)
    _, Psi = loadings(params, [3.0])
    s2 = Psi[0, 0] ** 2 * 1e-5 + 4e-6
    ll = innovation_loglik(s, YieldObservation(1.0, [3.0], [y]), params)
    assert ll == pytest.approx(-0.5 * np.log(2 * np.pi * s2), rel=1e-13)


def test_innovation_factorises_when_independent():
    params = CirParams(1.0, 0.05, 0.1, 0.0, [1e-3, 2e-3])
    s = KalmanState([0.04], [[0.0]], "predicted")
    obs = YieldObservation(1.0, [1.0, 4.0], [0.041, 0.043])
    y = model_yield(params, [0.04], [1.0, 4.0])
    ref = stats.norm.logpdf(0.041, y[0], 1e-3) + stats.norm.logpdf(0.043, y[1], 2e-3)
    assert innovation_loglik(s, obs, params) == pytest.approx(ref, rel=1e-12)


def test_innovation_matches_dense_density():
    rng = np.random.default_rng(9)
    for _ in range(20):
        params, state, obs = random_instance(rng)
        chi, Psi = loadings(params, obs.maturities)
        cov = Psi @ state.v @ Psi.T + np.diag(params.delta_for(obs.size) ** 2)
        ref = stats.multivariate_normal(chi + Psi @ state.xhat, cov).logpdf(obs.yields)
        assert innovation_loglik(state, obs, params) == pytest.approx(ref, abs=1e-10)
        # the same density with the maturities listed in another order
        perm = rng.permutation(obs.size)
        ref_perm = stats.multivariate_normal((chi + Psi @ state.xhat)[perm], cov[np.ix_(perm, perm)]).logpdf(
            obs.yields[perm]
        )
        assert innovation_loglik(state, obs, params) == pytest.approx(ref_perm, abs=1e-10)


# quasi-likelihood ----------------------------------------------------------


def test_single_observation_is_innovation_at_prior():
    obs = YieldObservation(1.0, MATS, [0.03, 0.035, 0.04])
    prior = predict(stationary_state(TWO), TWO)
    assert quasi_loglik([obs], TWO) == pytest.approx(innovation_loglik(prior, obs, TWO), rel=1e-12)


def test_lean_filter_matches_explicit_recursion():
    _, panel = simulate_panel(TWO, 40, MATS, seed=12)
    records = run_kalman(panel, TWO)
    state = stationary_state(TWO, 0.0)
    total = 0.0
    for obs, rec in zip(panel, records):
        state = predict(state, TWO)
        total += innovation_loglik(state, obs, TWO)
        state = correct(state, obs, TWO)
        np.testing.assert_allclose(rec.xhat, state.xhat, rtol=1e-9, atol=1e-14)
        np.testing.assert_allclose(rec.v_diag, np.diag(state.v), rtol=1e-8)
    assert quasi_loglik(panel, TWO) == pytest.approx(total, rel=1e-11)


def test_time_must_advance():
    obs = YieldObservation(1.0, MATS, [0.03, 0.035, 0.04])
    with pytest.raises(FilterStepError) as info:
        quasi_loglik([obs, obs], TWO)
    assert info.value.step == 2


def test_true_parameters_beat_inflated_ones():
    truth = CirParams(0.5, 0.06, 0.15, -0.1, 5e-4)
    off = CirParams(0.75, 0.09, 0.225, -0.15, 7.5e-4)
    wins = 0
    for seed in range(100):
        _, panel = simulate_panel(truth, 250, [0.5, 1, 3, 10], seed=seed)
        wins += quasi_loglik(panel, truth) > quasi_loglik(panel, off)
    assert wins >= 95


def test_overstated_noise_lowers_loglik_on_exact_data():
    p = CirParams(0.5, 0.06, 0.15, -0.1, 1e-4)
    path = simulate_factors(p, [0.06], 1.0, 60, seed=1)
    panel = [YieldObservation(t, MATS, model_yield(p, path[t], MATS)) for t in range(1, 61)]
    doubled = CirParams(0.5, 0.06, 0.15, -0.1, 2e-4)
    assert quasi_loglik(panel, p) > quasi_loglik(panel, doubled)


def test_factor_labels_are_exchangeable():
    _, panel = simulate_panel(TWO, 50, MATS, seed=2)
    swapped = CirParams(TWO.k[::-1], TWO.theta[::-1], TWO.sigma[::-1], TWO.lam[::-1], TWO.delta)
    assert quasi_loglik(panel, TWO) == pytest.approx(quasi_loglik(panel, swapped), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_covariance_stays_psd(seed):
    rng = np.random.default_rng(seed)
    params, state, _ = random_instance(rng)
    s = KalmanState(state.xhat, state.v, "corrected")
    for t in range(15):
        s = predict(s, params, dt=rng.uniform(0.1, 2))
        n = rng.integers(1, 4)
        mats = np.sort(rng.choice([0.25, 1, 2, 5, 10, 30], n, replace=False))
        obs = YieldObservation(s.time, mats, rng.uniform(-0.01, 0.1, n))
        s = correct(s, obs, params)
        assert np.linalg.eigvalsh(s.v).min() >= -1e-10
        assert np.all(s.xhat >= 0)


# estimation ------------------------------------------------------------------


def test_estimate_from_truth_does_not_lose_ground():
    truth = CirParams(0.5, 0.06, 0.15, -0.1, 5e-4)
    _, panel = simulate_panel(truth, 120, [0.5, 1, 3, 10], seed=21)
    est = estimate_qml(panel, truth, QmlOptions(restarts=1))
    assert est.loglik >= quasi_loglik(panel, truth)
    assert est.loglik == pytest.approx(quasi_loglik(panel, est.beta), rel=1e-12)
    assert est.to_dict()["beta"]["k"] == est.beta.k.tolist()


def test_estimate_rejects_infeasible_start():
    obs = YieldObservation(1.0, MATS, [0.03, 0.035, 0.04])
    with pytest.raises(ValueError):
        estimate_qml([obs, obs], TWO)


# augmented EKF -------------------------------------------------------------


def test_pinned_parameters_do_not_move():
    _, panel = simulate_panel(TWO, 20, MATS, seed=3)
    s = AugmentedState.from_params(TWO)
    for obs in panel:
        s = augmented_ekf_step(s, obs)
        np.testing.assert_array_equal(s.mean[2:], AugmentedState.from_params(TWO).mean[2:])


def test_pinned_ekf_equals_linear_filter():
    _, panel = simulate_panel(ONE, 40, [0.5, 2.0, 5.0], seed=4)
    records = run_kalman(panel, ONE)
    s = AugmentedState.from_params(ONE, time=0.0)
    for obs, rec in zip(panel, records):
        s = augmented_ekf_step(s, obs)
        np.testing.assert_allclose(s.block("x"), rec.xhat, atol=1e-6)


def test_free_parameters_are_learned_from():
    _, panel = simulate_panel(ONE, 30, [0.5, 2.0, 5.0], seed=5)
    cov = np.diag([0.04, 1e-5, 1e-4, 1e-3, 0.0])
    s = AugmentedState.from_params(ONE, param_cov=cov)
    for obs in panel:
        s = augmented_ekf_step(s, obs)
    assert np.all(np.isfinite(s.mean))
    assert np.linalg.eigvalsh(s.cov).min() >= -1e-12
    assert s.cov[1, 1] < 0.04


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_loading_jacobians_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    params, _, _ = random_instance(rng)
    T = np.array([0.25, 2.0, 10.0])
    jac = loading_jacobians(params, T)
    for name in ("k", "theta", "sigma", "lam"):
        for j in range(params.factors):
            # five-point stencil; chi at short maturity cancels terms of size
            # (2 k theta / sigma^2)(kappa - s) T, so tiny steps drown in rounding
            h = 1e-3 * max(abs(getattr(params, name)[j]), 0.05)

            def shifted(step):
                vals = {n: getattr(params, n).copy() for n in ("k", "theta", "sigma", "lam", "delta")}
                vals[name][j] += step
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    chi, Psi = loadings(CirParams(**vals), T)
                return chi, Psi[:, j]

            m2, m1, p1, p2 = (shifted(c * h) for c in (-2, -1, 1, 2))
            dchi, dPsi = jac[name]
            for i, exact in enumerate((dchi[:, j], dPsi[:, j])):
                fd = (m2[i] - 8 * m1[i] + 8 * p1[i] - p2[i]) / (12 * h)
                np.testing.assert_allclose(exact, fd, rtol=1e-5, atol=1e-10)
