import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import solve_discrete_lyapunov

from oracles import joint_gaussian_smoother, random_panel, random_params
from sdfm import kalman
from sdfm.core import DfmParams, KalmanBreakdown, TimeSeriesPanel

FIELDS = ("smoothed_mean", "smoothed_cov", "lag_cov", "filtered_mean", "filtered_cov",
          "predicted_mean", "predicted_cov", "init_mean", "init_cov")


def _instance(seed, n=None, p=None, r=None, missing=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(2, 51))
    p = p or int(rng.integers(1, 11))
    r = r or int(rng.integers(1, 4))
    missing = rng.uniform(0, 0.6) if missing is None else missing
    params = random_params(rng, p, r)
    return random_panel(rng, params, n, missing), params


@given(st.integers(0, 10 ** 6))
def test_univariate_matches_multivariate(seed):
    panel, params = _instance(seed)
    uni = kalman.filter_smooth(panel, params)
    multi = kalman.multivariate_filter_smooth(panel, params)
    for name in FIELDS:
        np.testing.assert_allclose(getattr(uni, name), getattr(multi, name), atol=1e-8, rtol=0, err_msg=name)
    assert abs(uni.loglik - multi.loglik) < 1e-8 * max(1.0, abs(multi.loglik))


@given(st.integers(0, 10 ** 6))
def test_matches_joint_gaussian_conditioning(seed):
    rng = np.random.default_rng(seed)
    panel, params = _instance(seed, n=int(rng.integers(2, 9)))
    uni = kalman.filter_smooth(panel, params)
    ref = joint_gaussian_smoother(panel, params)
    for name in ("smoothed_mean", "smoothed_cov", "lag_cov", "init_mean", "init_cov"):
        np.testing.assert_allclose(getattr(uni, name), ref[name], atol=1e-8, err_msg=name)
    assert abs(uni.loglik - ref["loglik"]) < 1e-8 * max(1.0, abs(ref["loglik"]))


def test_lag_cov_small_joint_example():
    panel, params = _instance(7, n=4, p=2, r=1, missing=0.0)
    ref = joint_gaussian_smoother(panel, params)
    np.testing.assert_allclose(kalman.filter_smooth(panel, params).lag_cov, ref["lag_cov"], atol=1e-10)


def test_near_noiseless_measurement_pins_state(rng):
    x = rng.normal(size=20)
    panel = TimeSeriesPanel(x[:, None], np.ones((20, 1), bool), np.zeros(1), np.ones(1), ("x",))
    prm = DfmParams(np.ones((1, 1)), np.zeros((1, 1)), np.array([1e-6]), np.ones((1, 1)), np.zeros(1),
                    np.ones((1, 1)))
    sm = kalman.filter_smooth(panel, prm)
    np.testing.assert_allclose(sm.smoothed_mean[:, 0], x, atol=1e-3)


def test_no_observations_gives_prior_path():
    n, p, r = 6, 3, 2
    rng = np.random.default_rng(3)
    prm = random_params(rng, p, r)
    out = kalman._univariate_pass(np.zeros((n, p)), np.zeros((n, p), dtype=bool), prm.loadings,
                                  prm.var_coef, prm.state_cov, prm.idio_var, prm.init_mean, prm.init_cov, 1e-9)
    a_pred, P_pred, _, _, v, C, K, used, loglik = out[:9]
    assert loglik == 0.0
    a_sm, _, a0_sm, _ = kalman._univariate_smooth(prm.loadings, prm.var_coef, prm.init_mean, prm.init_cov,
                                                  a_pred, P_pred, v, C, K, used)
    path = [np.linalg.matrix_power(prm.var_coef, t) @ prm.init_mean for t in range(1, n + 1)]
    np.testing.assert_allclose(a_sm, path, atol=1e-12)
    np.testing.assert_allclose(a0_sm, prm.init_mean)


def test_lag_cov_zero_when_factors_independent():
    panel, params = _instance(11, n=10, p=4, r=2)
    params = params.replace(var_coef=np.zeros((2, 2)))
    np.testing.assert_allclose(kalman.filter_smooth(panel, params).lag_cov, 0.0, atol=1e-14)


def test_lag_cov_scalar_substitution():
    c, a = 0.7, 0.45
    P = np.full((5, 1, 1), c)
    out = kalman.lag_one_cov(P, P, P, np.array([[a]]), np.array([[c]]))
    np.testing.assert_allclose(out, a * c)


def test_single_series_identical_to_multivariate():
    panel, params = _instance(5, n=30, p=1, r=2)
    uni = kalman.filter_smooth(panel, params)
    multi = kalman.multivariate_filter_smooth(panel, params)
    np.testing.assert_allclose(uni.smoothed_mean, multi.smoothed_mean, atol=1e-12)
    np.testing.assert_allclose(uni.loglik, multi.loglik, rtol=1e-13)


def test_zero_loadings_revert_to_prior_dynamics():
    panel, params = _instance(8, n=12, p=3, r=2)
    params = params.replace(loadings=np.zeros((3, 2)))
    sm = kalman.filter_smooth(panel, params)
    np.testing.assert_allclose(sm.smoothed_mean, sm.predicted_mean, atol=1e-12)


@given(st.integers(0, 10 ** 6))
def test_smoothed_covariances_psd_and_below_prediction(seed):
    panel, params = _instance(seed)
    sm = kalman.filter_smooth(panel, params)
    for P, Pp in zip(sm.smoothed_cov, sm.predicted_cov):
        assert np.max(np.abs(P - P.T)) < 1e-8
        assert np.linalg.eigvalsh(P).min() >= -1e-8
        assert np.linalg.eigvalsh(Pp - P).min() >= -1e-8


@given(st.integers(0, 10 ** 6))
def test_deleting_observations_never_reduces_uncertainty(seed):
    panel, params = _instance(seed, missing=0.2)
    rng = np.random.default_rng(seed + 1)
    mask = panel.mask & (rng.random(panel.mask.shape) > 0.3)
    mask[np.argmax(panel.mask, axis=0), np.arange(panel.p)] = True
    fewer = panel.with_mask(mask)
    d_full = np.diagonal(kalman.filter_smooth(panel, params).smoothed_cov, axis1=1, axis2=2)
    d_less = np.diagonal(kalman.filter_smooth(fewer, params).smoothed_cov, axis1=1, axis2=2)
    assert np.all(d_less >= d_full - 1e-10)


@given(st.integers(0, 10 ** 6))
def test_loglik_invariant_under_rotation(seed):
    panel, params = _instance(seed)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(params.r, params.r)))
    base = kalman.filter_smooth(panel, params).loglik
    rotated = kalman.filter_smooth(panel, params.rotate(Q)).loglik
    assert abs(base - rotated) < 1e-8 * max(1.0, abs(base))


@given(st.integers(0, 10 ** 6))
def test_series_order_does_not_matter(seed):
    panel, params = _instance(seed)
    perm = np.random.default_rng(seed).permutation(panel.p)
    shuffled = TimeSeriesPanel(panel.values[:, perm], panel.mask[:, perm], panel.means[perm], panel.sds[perm],
                               tuple(np.array(panel.series_names)[perm]))
    p2 = params.replace(loadings=params.loadings[perm], idio_var=params.idio_var[perm])
    a = kalman.filter_smooth(panel, params)
    b = kalman.filter_smooth(shuffled, p2)
    np.testing.assert_allclose(a.smoothed_mean, b.smoothed_mean, atol=1e-10)
    np.testing.assert_allclose(a.smoothed_cov, b.smoothed_cov, atol=1e-10)


def test_negative_innovation_variance_reports_position():
    panel, params = _instance(2, n=5, p=3, r=1, missing=0.0)
    bad = params.replace(idio_var=np.array([1.0, -50.0, 1.0]), loadings=np.full((3, 1), 0.1))
    with pytest.raises(KalmanBreakdown) as info:
        kalman.filter_smooth(panel, bad)
    assert info.value.t == 1 and info.value.i == 2


def test_rejects_non_finite_parameters():
    panel, params = _instance(2, n=5, p=3, r=1)
    with pytest.raises(ValueError):
        kalman.filter_smooth(panel, params.replace(var_coef=np.array([[np.nan]])))


def test_forecast_examples(rng):
    Lam = rng.normal(size=(4, 2))
    Q = np.array([[1.0, 0.2], [0.2, 0.5]])
    sig = rng.uniform(0.5, 1.0, 4)
    zero = DfmParams(Lam, np.zeros((2, 2)), sig, Q, np.zeros(2), np.eye(2))
    fc = kalman.forecast(zero, rng.normal(size=2), np.eye(2), 3)
    np.testing.assert_allclose(fc.obs_mean, 0.0)
    np.testing.assert_allclose(fc.obs_var, np.tile(np.diag(Lam @ Q @ Lam.T) + sig, (3, 1)))

    one = DfmParams(np.array([[2.0]]), np.array([[0.6]]), np.array([0.3]), np.array([[0.5]]),
                    np.zeros(1), np.eye(1))
    fc = kalman.forecast(one, np.array([1.5]), np.array([[0.2]]), 1)
    assert fc.factor_mean[0, 0] == pytest.approx(0.9)
    assert fc.obs_var[0, 0] == pytest.approx(4 * (0.36 * 0.2 + 0.5) + 0.3)

    A = np.array([[0.5, 0.2], [0.1, 0.3]])
    stat = DfmParams(Lam, A, sig, Q, np.zeros(2), np.eye(2))
    fc = kalman.forecast(stat, np.ones(2), np.eye(2), 200)
    Sf = np.eye(2)
    for _ in range(500):  # fixed-point iteration of the Lyapunov equation
        Sf = A @ Sf @ A.T + Q
    np.testing.assert_allclose(fc.obs_var[-1], np.diag(Lam @ Sf @ Lam.T) + sig, rtol=1e-10)
    np.testing.assert_allclose(Sf, solve_discrete_lyapunov(A, Q), rtol=1e-10)
    with pytest.raises(ValueError):
        kalman.forecast(stat, np.ones(2), np.eye(2), 0)
