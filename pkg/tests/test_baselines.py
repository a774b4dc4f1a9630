import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stmc.baselines import (BaselineError, RateMatrix, als_complete, cv_tune, nuclear_fe,
                            soft_impute, svt)


def _low_rank(n=30, t=15, r=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, r)) @ rng.normal(size=(r, t))


def _mask(shape, frac, seed=1):
    rng = np.random.default_rng(seed)
    o = rng.random(shape) >= frac
    return o


def _rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_rate_matrix_validation():
    with pytest.raises(ValueError):
        RateMatrix(np.zeros((2, 2)), np.ones((2, 3), bool))
    with pytest.raises(ValueError, match="non-finite"):
        RateMatrix(np.array([[np.nan, 1.0]]), np.ones((1, 2), bool))
    m = RateMatrix(np.array([[np.nan, 1.0]]), np.array([[False, True]]))
    assert m.values[0, 0] == 0.0
    with pytest.raises(BaselineError):
        RateMatrix(np.ones((2, 2)), np.array([[True, True], [False, False]])).require_coverage()


def test_als_rank_one_full_observation():
    truth = np.outer(np.arange(1, 7), np.arange(1, 5)).astype(float)
    fit = als_complete(RateMatrix(truth, np.ones_like(truth, bool)), 1, ridge=0.0, tol=1e-14)
    A, B = fit.extras["A"], fit.extras["B"]
    assert _rel_fro(A @ B.T, truth) < 1e-8


def test_als_objective_monotone():
    truth = _low_rank(12, 8, 2, seed=3) + 0.1 * np.random.default_rng(3).normal(size=(12, 8))
    fit = als_complete(RateMatrix(truth, _mask(truth.shape, 0.3)), 2, iters=200)
    obj = np.array(fit.objective)
    assert np.all(np.diff(obj) <= 1e-9 * obj[:-1])


def test_als_constant_matrix():
    m = RateMatrix(np.full((5, 4), 3.0), _mask((5, 4), 0.25, seed=2))
    fit = als_complete(m, 1, ridge=1e-8, tol=1e-14)
    assert np.allclose(fit.matrix, 3.0, atol=1e-4)


def test_soft_impute_limits():
    truth = _low_rank(10, 6)
    m = RateMatrix(truth, _mask(truth.shape, 0.3))
    top = np.linalg.norm(np.where(m.observed, truth, 0), 2)
    zero = soft_impute(m, top * 1.01)
    assert np.all(zero.matrix[~m.observed] == 0)
    full = RateMatrix(truth, np.ones_like(truth, bool))
    ident = soft_impute(full, 0.0, iters=5)
    assert np.allclose(ident.matrix, truth)
    with pytest.raises(ValueError):
        soft_impute(m, -1.0)


def test_soft_impute_objective_non_increasing():
    truth = _low_rank(10, 6, seed=4)
    m = RateMatrix(truth, _mask(truth.shape, 0.3, seed=4))
    obj = np.array(soft_impute(m, 0.5, iters=300).objective)
    assert np.all(np.diff(obj) <= 1e-9 * np.abs(obj[:-1]) + 1e-12)


def test_soft_impute_debias_recovers_low_rank():
    truth = _low_rank()
    m = RateMatrix(truth, _mask(truth.shape, 0.25))
    fit = soft_impute(m, 0.5, debias=True)
    assert fit.extras["rank"] == 2
    assert _rel_fro(fit.matrix, truth) < 1e-3


def test_svt_reproduces_full_matrix_and_recovers():
    truth = _low_rank()
    full = svt(RateMatrix(truth, np.ones_like(truth, bool)), threshold=5.0, tol=1e-10)
    assert np.array_equal(full.matrix, truth)
    m = RateMatrix(truth, _mask(truth.shape, 0.25))
    fit = svt(m, threshold=5 * np.sqrt(30 * 15), tol=1e-7, iters=20_000)
    assert fit.converged
    assert _rel_fro(fit.matrix, truth) < 1e-3


def test_svt_diverges_with_large_step():
    truth = _low_rank(seed=5)
    m = RateMatrix(truth, _mask(truth.shape, 0.25, seed=5))
    with pytest.raises(BaselineError, match="diverged"):
        svt(m, threshold=1.0, step=10.0 / m.observed.mean(), iters=2000)


def test_nuclear_fe_recovers_pure_fixed_effects():
    rng = np.random.default_rng(6)
    row, col = rng.normal(size=8), rng.normal(size=6)
    truth = row[:, None] + col[None, :]
    m = RateMatrix(truth, _mask(truth.shape, 0.3, seed=6))
    fit = nuclear_fe(m, lam=1.0)
    assert np.allclose(fit.matrix, truth, atol=1e-6)
    assert np.allclose(fit.extras["low_rank"], 0.0)


def test_nuclear_fe_constant_shift_equivariance():
    truth = _low_rank(10, 6, seed=7)
    m = RateMatrix(truth, _mask(truth.shape, 0.3, seed=7))
    a = nuclear_fe(m, lam=0.5).matrix
    b = nuclear_fe(RateMatrix(truth + 4.0, m.observed), lam=0.5).matrix
    assert np.allclose(b - a, 4.0, atol=1e-6)


def test_nuclear_fe_infinite_penalty_is_two_way_least_squares():
    rng = np.random.default_rng(8)
    truth = rng.normal(size=(7, 5))
    o = _mask(truth.shape, 0.3, seed=8)
    fit = nuclear_fe(RateMatrix(truth, o), lam=np.inf)
    # oracle: dummy-variable regression on the observed cells
    ii, tt = np.nonzero(o)
    X = np.zeros((len(ii), 7 + 5))
    X[np.arange(len(ii)), ii] = 1
    X[np.arange(len(ii)), 7 + tt] = 1
    coef, *_ = np.linalg.lstsq(X, truth[ii, tt], rcond=None)
    pred = coef[:7, None] + coef[None, 7:]
    assert np.allclose(fit.matrix[~o], pred[~o], atol=1e-8)


def test_cv_tune_cases():
    truth = _low_rank(12, 8, seed=9)
    m = RateMatrix(truth, _mask(truth.shape, 0.2, seed=9))
    calls = []

    def method(mm, lam):
        calls.append(lam)
        return soft_impute(mm, lam, iters=500)  # shrinkage bias grows with lam

    assert cv_tune(method, m, [0.7]) == 0.7 and not calls
    grid = [5.0, 1.0, 0.1]
    best = cv_tune(method, m, grid, folds=5, rng=np.random.default_rng(0))
    assert best == 0.1
    again = cv_tune(method, m, grid, folds=5, rng=np.random.default_rng(0))
    assert again == best
    with pytest.raises(ValueError):
        cv_tune(method, m, [])


def test_cv_tune_ties_go_to_stronger():
    m = RateMatrix(np.ones((4, 4)), np.ones((4, 4), bool))
    const = lambda mm, lam: soft_impute(mm, 0.0, iters=1)
    assert cv_tune(const, m, [0.1, 2.0, 1.0], folds=4) == 2.0
    assert cv_tune(const, m, [3, 1, 2], folds=4, stronger="smaller") == 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["als", "soft", "nfe"]))
def test_observed_entries_untouched_and_permutation_invariant(seed, which):
    rng = np.random.default_rng(seed)
    truth = _low_rank(8, 6, seed=seed) + 0.05 * rng.normal(size=(8, 6))
    o = rng.random((8, 6)) > 0.25
    o[:, 0] = True
    o[0, :] = True
    run = {"als": lambda mm: als_complete(mm, 2, iters=300),
           "soft": lambda mm: soft_impute(mm, 0.3, iters=300),
           "nfe": lambda mm: nuclear_fe(mm, 0.3, iters=300)}[which]
    fit = run(RateMatrix(truth, o)).matrix
    assert np.array_equal(fit[o], truth[o])
    if which == "als":
        return  # random initialisation is tied to row order
    pr, pc = rng.permutation(8), rng.permutation(6)
    fit_p = run(RateMatrix(truth[pr][:, pc], o[pr][:, pc])).matrix
    assert np.allclose(fit_p, fit[pr][:, pc], atol=1e-6)
