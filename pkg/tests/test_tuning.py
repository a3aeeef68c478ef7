import numpy as np
import pytest

from sdfm import em, sim, tuning
from sdfm.core import FitConfig, TimeSeriesPanel, standardise


def test_ic_penalty_value():
    assert tuning.ic_penalty(100, 100) == pytest.approx(200 / 10000 * np.log(100), rel=1e-15)
    assert 3 * tuning.ic_penalty(100, 100) == pytest.approx(3 * 0.0921034037197618, rel=1e-12)


def test_ic_values_match_direct_pca_residuals(rng):
    X = rng.normal(size=(40, 8)) + rng.normal(size=(40, 1)) @ rng.normal(size=(1, 8))
    panel = standardise(X)
    rep = tuning.select_num_factors(panel, 5)
    Z = panel.values
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    for r in range(1, 6):
        resid = Z - (U[:, :r] * s[:r]) @ Vt[:r]
        V = np.mean(resid ** 2)
        assert rep.ic_values[r] == pytest.approx(np.log(V) + r * tuning.ic_penalty(40, 8), rel=1e-10)
    assert rep.chosen_r == min(rep.ic_values, key=rep.ic_values.get)


def test_median_window_fill():
    raw = np.array([[1.0], [np.nan], [3.0], [10.0], [np.nan]])
    panel = standardise(raw)
    X = tuning.median_window_fill(panel, 3)
    v = panel.values[:, 0]
    med = np.nanmedian(v)
    filled = np.where(np.isnan(v), med, v)
    assert X[1, 0] == pytest.approx((filled[0] + filled[1] + filled[2]) / 3)
    assert X[4, 0] == pytest.approx((filled[3] + 2 * filled[4]) / 3)
    np.testing.assert_array_equal(X[panel.mask], panel.values[panel.mask])


def test_pure_noise_selects_one_factor():
    picks = [tuning.select_num_factors(standardise(sim.make_rng(s).standard_normal((100, 60))), 6).chosen_r
             for s in range(20)]
    assert sum(r == 1 for r in picks) >= 16


def test_rank_truncation_warns():
    x = np.arange(12.0)
    panel = standardise(np.column_stack([x, x ** 2, 2 * x + x ** 2]))
    with pytest.warns(RuntimeWarning, match="rank"):
        rep = tuning.select_num_factors(panel, 3)
    assert max(rep.ic_values) == 2
    with pytest.raises(ValueError):
        tuning.select_num_factors(panel, 0)


def test_selection_ignores_series_order():
    data = sim.simulate(sim.DgpSpec(100, 30, 0.3, seed=3))
    perm = np.random.default_rng(0).permutation(30)
    a = tuning.select_num_factors(data.panel, 5)
    b = tuning.select_num_factors(standardise(data.raw[:, perm]), 5)
    assert a.chosen_r == b.chosen_r
    for r in a.ic_values:
        assert a.ic_values[r] == pytest.approx(b.ic_values[r], rel=1e-12)


def test_alpha_grid_default():
    g = tuning.alpha_grid()
    assert len(g) == 20 and g[0] == pytest.approx(1e-3) and g[-1] == pytest.approx(1e2)
    assert np.allclose(np.diff(np.log(g)), np.log(1e5) / 19)
    with pytest.raises(ValueError):
        tuning.alpha_grid(1)


def test_bic_dense_penalty_and_tiny_alpha():
    data = sim.simulate(sim.DgpSpec(80, 20, 0.0, seed=2))
    panel = data.panel
    res = em.fit(panel, FitConfig(2, 1e-3))
    dense = em.fit(panel, FitConfig(2, 0.0))
    assert res.nonzero_counts == (20, 20)
    npp = panel.n * panel.p
    expected = np.log(tuning.residual_mean_square(panel, res)) + np.log(npp) / npp * 2 * 20
    assert tuning.bic(panel, res) == pytest.approx(expected, rel=1e-14)
    assert np.isfinite(tuning.bic(panel, res))
    np.testing.assert_allclose(res.params.loadings, dense.params.loadings, atol=1e-2)


def test_residual_mean_square_uses_observed_cells_only():
    data = sim.simulate(sim.DgpSpec(60, 10, 0.0, seed=4))
    raw = data.raw.copy()
    raw[5:9, 2] = np.nan
    panel = standardise(raw)
    res = em.fit(panel, FitConfig(2, 0.1))
    altered = TimeSeriesPanel(np.where(panel.mask, panel.values, np.nan), panel.mask, panel.means, panel.sds,
                              panel.series_names)
    assert tuning.residual_mean_square(panel, res) == tuning.residual_mean_square(altered, res)


def test_select_alpha_early_termination_and_ties():
    data = sim.simulate(sim.DgpSpec(60, 12, 0.0, seed=5))
    grid = tuple(np.logspace(-1, 4, 12))
    rep = tuning.select_alpha(data.panel, 2, grid=grid)
    assert rep.terminated_early
    last = max(rep.bic_values)
    assert min(rep.fits[last].nonzero_counts) == 0
    assert all(a <= last for a in rep.bic_values)
    assert rep.chosen_alpha == min(rep.bic_values, key=lambda a: (rep.bic_values[a], -a))
    assert rep.best_fit is rep.fits[rep.chosen_alpha]


def test_select_alpha_validation():
    data = sim.simulate(sim.DgpSpec(30, 6, 0.0, seed=6))
    with pytest.raises(ValueError):
        tuning.select_alpha(data.panel, 2, grid=(1.0, 0.5))
    with pytest.raises(ValueError):
        tuning.select_alpha(data.panel, 2, grid=(1.0,))
    with pytest.raises(ValueError):
        tuning.select_alpha(data.panel, 2, base_config=FitConfig(3))


def test_tune_runs_both_stages():
    data = sim.simulate(sim.DgpSpec(80, 20, 0.0, seed=7))
    rep = tuning.tune(data.panel, 4, grid=(0.01, 1.0, 10.0))
    assert rep.chosen_r == 2 and set(rep.ic_values) == {1, 2, 3, 4}
    assert rep.chosen_alpha in rep.bic_values
