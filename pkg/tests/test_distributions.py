import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from stmc import distributions as d
from stmc.graphs import edges_from_pairs, knn_lattice_adjacency, path_adjacency

from conftest import central_diff, rel_err


def _nb(y, log_mu, log_phi):
    return float(np.sum(d._negbin(np.asarray(y, float), log_mu, log_phi)[0]))


def test_negbin_poisson_limit():
    lp, *_ = d.negbin_log_pmf(0, d.NegBinParams(1.0, 1e6))
    assert abs(lp - (-1.0)) < 1e-4


def test_negbin_against_product_form():
    # Gamma(y + phi) / (Gamma(phi) y!) as an explicit finite product
    y, mu, phi = 3, 3.0, 2.0
    coef = math.prod(phi + j for j in range(y)) / math.factorial(y)
    expected = math.log(coef) + phi * math.log(phi / (phi + mu)) + y * math.log(mu / (phi + mu))
    lp, *_ = d.negbin_log_pmf(y, d.NegBinParams(mu, phi))
    assert abs(lp - expected) < 1e-12
    assert abs(lp - stats.nbinom.logpmf(y, phi, phi / (phi + mu))) < 1e-12


def test_negbin_gradient():
    lp, g_mu, g_phi = d.negbin_log_pmf(5, d.NegBinParams(2.0, 1.0))
    fd = central_diff(lambda x: _nb(5, x[0], x[1]), np.log([2.0, 1.0]))
    assert rel_err([g_mu, g_phi], fd) < 1e-6


def test_negbin_normalises():
    y = np.arange(501)
    lp, *_ = d.negbin_log_pmf(y, d.NegBinParams(2.0, 1.0))
    assert abs(np.exp(lp).sum() - 1.0) < 1e-8


def test_negbin_rejects_bad_params():
    with pytest.raises(ValueError):
        d.NegBinParams(0.0, 1.0)
    with pytest.raises(ValueError):
        d.NegBinParams(1.0, -1.0)


def test_icar_examples():
    adj = path_adjacency(3)
    lp, _, _ = d.icar_log_density(np.array([0.0, 1.0, 0.0]), adj, 2.0)
    assert abs(lp - (-2.0 + math.log(2.0))) < 1e-12
    lp_c, grad_c, _ = d.icar_log_density(np.full(3, 4.2), adj, 3.0)
    assert abs(lp_c - 1.0 * math.log(3.0)) < 1e-12
    assert np.allclose(grad_c, 0.0)


def test_icar_gradient_and_shift_invariance():
    adj, _ = knn_lattice_adjacency(8, k=3, seed=1)
    rng = np.random.default_rng(0)
    u = rng.normal(size=(2, 8))
    tau = 1.7
    lp, g, g_tau = d.icar_log_density(u, adj, tau)
    assert rel_err(g, central_diff(lambda x: d.icar_log_density(x, adj, tau)[0], u)) < 1e-6
    fd_tau = central_diff(lambda x: d.icar_log_density(u, adj, math.exp(x[0]))[0], [math.log(tau)])
    assert rel_err(g_tau, fd_tau) < 1e-6
    assert abs(d.icar_log_density(u + 3.3, adj, tau)[0] - lp) < 1e-10


def test_ar1_examples():
    T, c, sigma = 6, 0.7, 0.4
    v = np.full(T, c)
    lp, *_ = d.ar1_log_density(v, c, 0.0, sigma)
    anchor = stats.norm.logpdf(c, 0, d.AR1_ANCHOR_SD)
    assert abs(lp - (anchor + (T - 1) * stats.norm.logpdf(0, 0, sigma))) < 1e-12
    rng = np.random.default_rng(2)
    v = rng.normal(size=T)
    lp, *_ = d.ar1_log_density(v, 0.0, 1.0, sigma)
    walk = stats.norm.logpdf(np.diff(v), 0, sigma).sum() + stats.norm.logpdf(v[0], 0, d.AR1_ANCHOR_SD)
    assert abs(lp - walk) < 1e-12


def test_ar1_gradient():
    rng = np.random.default_rng(3)
    v = rng.normal(size=7)
    a, b, ls = 0.2, 0.8, math.log(0.5)

    def f(x):
        return d.ar1_log_density(x[:7], x[7], x[8], math.exp(x[9]))[0]

    _, g, g_a, g_b, g_ls = d.ar1_log_density(v, a, b, math.exp(ls))
    x = np.concatenate([v, [a, b, ls]])
    assert rel_err(np.concatenate([g, [g_a, g_b, g_ls]]), central_diff(f, x)) < 1e-6


def test_fused_laplace_examples():
    adj = path_adjacency(2)
    lp0, *_ = d.fused_laplace_log_density(np.zeros(2), adj, 1.3, 0.7)
    # zero vector: only the lambda normalisers remain
    assert abs(lp0 - (math.log(1.3) + 2 * math.log(0.7))) < 1e-12
    lp, *_ = d.fused_laplace_log_density(np.array([1.0, -1.0]), adj, 1.0, 1.0)
    assert lp == pytest.approx(-4.0, abs=1e-12)


def test_fused_laplace_subgradient_away_from_kinks():
    adj, _ = knn_lattice_adjacency(7, k=2, seed=2)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 7)) * 3
    lf, ls = 0.8, 1.4
    _, g, g_lf, g_ls = d.fused_laplace_log_density(x, adj, lf, ls)
    assert rel_err(g, central_diff(lambda z: d.fused_laplace_log_density(z, adj, lf, ls)[0], x,
                                   h=1e-7)) < 1e-6
    fd = central_diff(lambda z: d.fused_laplace_log_density(x, adj, math.exp(z[0]), math.exp(z[1]))[0],
                      np.log([lf, ls]))
    assert rel_err([g_lf, g_ls], fd) < 1e-6


def test_shrinkage_eta_and_reduction():
    st_ = d.ShrinkageState(np.ones((3, 5)), np.array([1.0, 2.0, 2.0]))
    assert st_.eta.tolist() == [1.0, 2.0, 4.0]
    rng = np.random.default_rng(5)
    v = rng.normal(size=(2, 5))
    phi = rng.uniform(0.5, 2.0, (2, 5))
    state = d.ShrinkageState(phi, np.ones(2))
    lp, *_ = d.shrinkage_ar1_log_density(v, 0.1, 0.6, state)
    lp_ar = sum(d.ar1_rows(v[k:k + 1], 0.1, 0.6, phi[k:k + 1, 1:])[0] for k in range(2))
    hyper = (stats.gamma.logpdf(phi, 1.5, scale=1 / 1.5).sum() + stats.gamma.logpdf(1.0, 2.0)
             + stats.gamma.logpdf(1.0, 3.0))
    assert abs(lp - (lp_ar + hyper)) < 1e-10
    with pytest.raises(ValueError):
        d.ShrinkageState(phi, np.ones(2), a2=1.0)


def test_shrinkage_gradient():
    rng = np.random.default_rng(6)
    K, T = 3, 5
    v = rng.normal(size=(K, T))
    lphi = rng.normal(scale=0.3, size=(K, T))
    ldel = rng.normal(scale=0.3, size=K)
    a, b = 0.1, 0.7

    def unpack(x):
        i = 0
        out = []
        for size in (K * T, 1, 1, K * T, K):
            out.append(x[i:i + size])
            i += size
        return out

    def f(x):
        vv, aa, bb, lp_, ld = unpack(x)
        s = d.ShrinkageState(np.exp(lp_.reshape(K, T)), np.exp(ld))
        return d.shrinkage_ar1_log_density(vv.reshape(K, T), aa[0], bb[0], s)[0]

    s = d.ShrinkageState(np.exp(lphi), np.exp(ldel))
    _, g, ga, gb, gphi, gdel = d.shrinkage_ar1_log_density(v, a, b, s)
    x = np.concatenate([v.ravel(), [a], [b], lphi.ravel(), ldel])
    analytic = np.concatenate([g.ravel(), [ga], [gb], gphi.ravel(), gdel])
    assert rel_err(analytic, central_diff(f, x)) < 1e-5


def test_standard_densities():
    assert d.normal_logpdf(0.0, 0.0, 1.0)[0] == pytest.approx(-0.5 * math.log(2 * math.pi))
    assert d.gamma_logpdf(1.0, 1.0, 0.01)[0] == pytest.approx(math.log(0.01) - 0.01)
    _, dx, dm, dsd = d.normal_logpdf(0.3, -0.2, 1.5)
    fd = central_diff(lambda z: d.normal_logpdf(z[0], z[1], z[2])[0], [0.3, -0.2, 1.5])
    assert rel_err([dx, dm, dsd], fd) < 1e-6
    _, gx, glog = d.gamma_logpdf(2.5, 3.0, 2.0)
    assert rel_err(gx, central_diff(lambda z: d.gamma_logpdf(z[0], 3.0, 2.0)[0], [2.5])) < 1e-6
    assert glog == pytest.approx(gx * 2.5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 60), st.floats(-3, 5), st.floats(-2, 4))
def test_negbin_gradient_property(y, log_mu, log_phi):
    _, g_mu, g_phi = d._negbin(np.float64(y), log_mu, log_phi)
    fd = central_diff(lambda x: _nb(y, x[0], x[1]), [log_mu, log_phi])
    assert rel_err([g_mu, g_phi], fd, floor=1e-4) < 1e-5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10))
def test_icar_gradient_property(seed, tau):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    adj = edges_from_pairs(n, [(i, int(j)) for i in range(n) for j in rng.integers(0, n, 2) if j != i])
    u = rng.normal(size=n)
    _, g, _ = d.icar_log_density(u, adj, tau)
    assert rel_err(g, central_diff(lambda x: d.icar_log_density(x, adj, tau)[0], u), floor=1e-4) < 1e-5
