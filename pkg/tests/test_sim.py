import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sdfm import sim


def test_dgp_parameters_and_validation():
    prm = sim.DgpSpec(50, 10, 0.6).params()
    np.testing.assert_array_equal(prm.loadings[:5, 0], 1.0)
    np.testing.assert_array_equal(prm.loadings[5:, 0], 0.0)
    np.testing.assert_array_equal(prm.var_coef, [[0.8, 0.0], [0.6, 0.0]])
    np.testing.assert_allclose(np.diag(sim.stationary_cov(prm.var_coef, prm.state_cov)), 1.0, atol=1e-14)
    for bad in (dict(n=10, p=5), dict(n=10, p=4, rho=1.0), dict(n=10, p=4, a=-1.0), dict(n=1, p=4)):
        with pytest.raises(ValueError):
            sim.DgpSpec(**bad)


def test_long_run_factor_variance():
    data = sim.simulate(sim.DgpSpec(100000, 2, 0.6, seed=1))
    v = data.factors.var(axis=0)
    assert np.all((v > 0.97) & (v < 1.03))


def test_simulation_is_seeded():
    a = sim.simulate(sim.DgpSpec(20, 4, 0.3, seed=9))
    b = sim.simulate(sim.DgpSpec(20, 4, 0.3, seed=9))
    c = sim.simulate(sim.DgpSpec(20, 4, 0.3, seed=10))
    np.testing.assert_array_equal(a.raw, b.raw)
    assert not np.array_equal(a.raw, c.raw)


def test_align_examples():
    L = sim.DgpSpec(10, 8).params().loadings
    np.testing.assert_array_equal(sim.align_loadings(L[:, ::-1], L), L)
    np.testing.assert_array_equal(sim.align_loadings(-L, L), L)
    np.testing.assert_allclose(sim.align_loadings(2 * L, L), L, atol=1e-12)
    with pytest.raises(ValueError):
        sim.align_loadings(L[:, :1], L)


@pytest.mark.parametrize("r", [1, 2, 3])
def test_align_undoes_every_signed_permutation(r):
    rng = np.random.default_rng(r)
    L = rng.normal(size=(12, r))
    L = L + 3 * np.kron(np.eye(r), np.ones((12 // r, 1)))[:12]
    for M in sim.signed_permutations(r):
        for scale in (0.3, 1.0, 7.0):
            np.testing.assert_allclose(sim.align_loadings(scale * L @ M, L), L, atol=1e-12)


def test_signed_permutation_count():
    for r in (1, 2, 3):
        mats = list(sim.signed_permutations(r))
        assert len(mats) == 2 ** r * len(list(itertools.permutations(range(r))))
        for M in mats:
            np.testing.assert_array_equal(M.T @ M, np.eye(r))


def test_mae_examples(rng):
    L = rng.normal(size=(6, 2))
    assert sim.loading_mae(L, L) == 0.0
    assert sim.loading_mae(L + 0.1, L) == pytest.approx(0.1)
    E = rng.normal(size=(6, 2))
    manual = sum(abs(E[i, k] - L[i, k]) for i in range(6) for k in range(2)) / 12
    assert sim.loading_mae(E, L) == pytest.approx(manual, rel=1e-14)


def test_f1_examples():
    L = sim.DgpSpec(10, 8).params().loadings
    assert sim.support_f1(L, L) == 1.0
    assert sim.support_f1(np.zeros_like(L), L) == 0.0
    half = L.copy()
    half[:2, 0] = 0.0
    half[4:6, 1] = 0.0
    assert sim.support_f1(half, L) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        sim.support_f1(L, L, -1.0)


@given(st.integers(0, 10 ** 6))
def test_f1_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    est = rng.normal(size=(8, 2)) * (rng.random((8, 2)) > 0.5)
    truth = rng.normal(size=(8, 2)) * (rng.random((8, 2)) > 0.5)
    assert 0.0 <= sim.support_f1(est, truth) <= 1.0


def test_ar1_examples():
    np.testing.assert_array_equal(sim.ar1_forecast(np.zeros(20), 3), 0.0)
    rng = sim.make_rng(0)
    x = np.zeros(5000)
    for t in range(1, 5000):
        x[t] = 0.8 * x[t - 1] + rng.standard_normal()
    assert abs(sim.fit_ar1(x) - 0.8) < 0.05
    far = sim.ar1_forecast(x, 400)
    assert abs(far[-1]) < 1e-20
    with pytest.raises(ValueError):
        sim.fit_ar1(np.r_[np.ones(5), np.full(20, np.nan)])
    with pytest.raises(ValueError):
        sim.ar1_forecast(x, 0)


def test_ar1_skips_gaps():
    x = np.array([1.0, 0.5, np.nan, 2.0, 1.0, 0.5, np.nan, np.nan, 4.0, 2.0, 1.0, 0.5, 0.25, 0.125])
    assert sim.fit_ar1(x) == pytest.approx(0.5)
    assert sim.ar1_forecast(x, 2) == pytest.approx([0.0625, 0.03125])


def test_block_missing_columns():
    cols = sim.block_missing_columns(64, 0.25)
    np.testing.assert_array_equal(cols + 1, np.r_[1:9, 33:41])
    assert len(sim.block_missing_columns(64, 1.0)) == 64


def test_rotation_curve_examples():
    assert sim.rotation_norm_curve(0, [0.0])[0][1] == 10
    assert sim.rotation_norm_curve(0, [np.pi / 4])[0][1] == 20
    thetas = np.linspace(-np.pi, np.pi, 101)[1:]
    l2 = np.array([v for _, v in sim.rotation_norm_curve(2, thetas)])
    assert np.ptp(l2) < 1e-12
    with pytest.raises(ValueError):
        sim.rotation_norm_curve(2, [-np.pi])
    with pytest.raises(ValueError):
        sim.entry_norm(np.eye(2), 3)
