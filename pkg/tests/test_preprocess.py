import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import CubicSpline

from stmc.preprocess import (SmoothingError, _truncated_power_natural, natural_spline_basis,
                             scree, scree_matrix, smooth_panel, smooth_series)

from conftest import make_panel


def _fitted(X, y):
    X1 = np.column_stack([np.ones(len(y)), X])
    coef, *_ = np.linalg.lstsq(X1, y, rcond=None)
    return X1 @ coef


def test_basis_shape_and_errors():
    assert natural_spline_basis(np.arange(1, 16), 5).shape == (15, 5)
    with pytest.raises(ValueError, match="distinct"):
        natural_spline_basis(np.arange(5), 5)
    with pytest.raises(ValueError):
        natural_spline_basis(np.arange(10), 1)


def test_basis_is_linear_beyond_boundary_knots():
    knots = np.concatenate([[0.0], np.quantile(np.linspace(0, 1, 15), [0.2, 0.4, 0.6, 0.8]), [1.0]])
    h = 1e-3
    for side in (np.arange(-0.5, 0.0 + h / 2, h), np.arange(1.0, 1.5, h)):
        B = _truncated_power_natural(side, knots)
        second = np.diff(B, 2, axis=0) / h ** 2
        assert np.abs(second).max() < 1e-6


def test_basis_span_matches_reference_natural_spline():
    # cardinal natural cubic interpolants on the same knots span the same space
    times = np.arange(1, 16, dtype=float)
    df = 5
    knots = np.concatenate([[1.0], np.quantile(times, np.linspace(0, 1, df + 1)[1:-1]), [15.0]])
    ref = np.column_stack([CubicSpline(knots, np.eye(len(knots))[j], bc_type="natural")(times)
                           for j in range(len(knots))])
    y = np.random.default_rng(0).normal(size=15)
    ours = _fitted(natural_spline_basis(times, df), y)
    coef, *_ = np.linalg.lstsq(ref, y, rcond=None)
    assert np.max(np.abs(ours - ref @ coef)) < 1e-8


def test_irls_matches_statsmodels_glm():
    rng = np.random.default_rng(1)
    times = np.arange(1, 16, dtype=float)
    pops = rng.uniform(1e3, 5e4, 15)
    y = rng.poisson(pops * 1e-3 * np.exp(np.sin(times / 3))).astype(float)
    res = smooth_series(y, pops, df=5, times=times)
    X = sm.add_constant(natural_spline_basis(times, 5))
    glm = sm.GLM(y, X, family=sm.families.Poisson(), offset=np.log(pops)).fit(tol=1e-12)
    assert res.converged
    assert np.allclose(res.fitted, glm.fittedvalues, rtol=1e-6)


def test_constant_rate_is_reproduced():
    pops = np.linspace(2e4, 3e4, 15)
    y = np.round(0.01 * pops)
    res = smooth_series(y, pops)
    assert np.all(np.abs(res.fitted - y) <= 0.05 * y)
    assert np.all(res.fitted > 0)


def test_all_zero_series_is_flagged():
    res = smooth_series(np.zeros(15), np.full(15, 100.0))
    assert res.flag and np.array_equal(res.fitted, np.zeros(15))


def test_sparse_series_stays_finite():
    y = np.zeros(15)
    y[[2, 11]] = 1
    res = smooth_series(y, np.full(15, 500.0))
    assert np.all(np.isfinite(res.fitted)) and np.all(res.fitted > 0)
    assert res.fitted.sum() == pytest.approx(2.0, abs=1e-6)


def test_non_convergence_raises():
    y = np.random.default_rng(2).poisson(20, 15)
    with pytest.raises(SmoothingError):
        smooth_series(y, np.full(15, 1e3), max_iter=1)


def test_smooth_panel_marks_and_preserves_totals(toy_panel):
    counts = np.vstack([toy_panel.counts, np.zeros((1, 5))])
    panel = make_panel(counts, np.vstack([toy_panel.populations, np.full((1, 5), 1e3)]))
    out = smooth_panel(panel, df=2)
    assert out.smoothed and not panel.smoothed
    assert np.allclose(out.counts.sum(axis=1), counts.sum(axis=1), rtol=1e-6)
    assert np.array_equal(out.counts[-1], np.zeros(5))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3, 5]))
def test_totals_preserved_and_positive(seed, df):
    rng = np.random.default_rng(seed)
    pops = rng.uniform(500, 5e4, 15)
    y = rng.poisson(pops * rng.uniform(1e-4, 1e-2)).astype(float)
    if y.sum() == 0:
        y[0] = 1
    res = smooth_series(y, pops, df=df)
    assert np.all(res.fitted > 0)
    assert abs(res.fitted.sum() - y.sum()) < 1e-6 * max(1.0, y.sum())


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_population_rescaling(seed):
    rng = np.random.default_rng(seed)
    pops = rng.uniform(1e3, 1e4, 15)
    y = rng.poisson(pops * 5e-3).astype(float)
    a = smooth_series(y, pops).fitted / pops
    b = smooth_series(2 * y, 2 * pops).fitted / (2 * pops)
    assert np.allclose(a, b, rtol=1e-5)


def test_scree_examples():
    rank1 = np.outer(np.arange(1, 11), np.arange(1, 9)).astype(float)
    f = scree(rank1)
    assert f[0] == pytest.approx(1.0) and np.allclose(f[1:], 0, atol=1e-12)
    with pytest.raises(ValueError):
        scree(np.ones((4, 3)))
    with pytest.raises(ValueError):
        scree(np.array([[1.0, np.nan]]))


def test_scree_eigen_oracle():
    m = np.random.default_rng(3).normal(size=(10, 8))
    eig = np.sort(np.linalg.eigvalsh(np.cov(m, rowvar=False)))[::-1]
    f = scree(m)
    assert np.allclose(f, eig / eig.sum(), atol=1e-10)
    assert f.sum() == pytest.approx(1.0) and np.all((f >= 0) & (f <= 1))
    assert np.all(np.diff(f) <= 0)


def test_scree_matrix_fills_treated_with_column_mean(toy_panel):
    m = scree_matrix(toy_panel, denominator=1.0)
    rates = toy_panel.counts / toy_panel.populations
    col = rates[2:, 3].mean()
    assert np.allclose(m[:2, 3], col)
    assert np.allclose(m[~toy_panel.treated], rates[~toy_panel.treated])
