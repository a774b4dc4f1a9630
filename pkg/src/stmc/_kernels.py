"""Compiled log posterior and gradient, the sampler's hot path.

Mirrors :meth:`stmc.model.Posterior._evaluate` term for term; the numpy
version stays the readable reference (it also reports per-term values)
and the test suite checks the two agree. At panel sizes of a few hundred
cells the numpy version is dominated by per-call overhead, which this
removes.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
ANCHOR_SD = 10.0

FAMILY_CODES = {
    "vanilla": 0,
    "space": 1,
    "space_time_icar": 2,
    "space_time_ar": 3,
    "space_time_lasso": 4,
    "space_time_shrinkage": 5,
}


@njit(cache=True)
def digamma(x):
    """Digamma for x > 0: upward recurrence, then the asymptotic series."""
    acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132)))))
    return acc + math.log(x) - 0.5 * inv - series


@njit(cache=True)
def _logaddexp(a, b):
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def _sign(v):
    if v > 0.0:
        return 1.0
    if v < 0.0:
        return -1.0
    return 0.0


@njit(cache=True)
def _soft_mean(x, g, off, rows, length, sd):
    lp = 0.0
    for k in range(rows):
        m = 0.0
        for j in range(length):
            m += x[off + k * length + j]
        m /= length
        lp += -0.5 * (m / sd) ** 2 - math.log(sd) - 0.5 * LOG_2PI
        d = m / (sd * sd) / length
        for j in range(length):
            g[off + k * length + j] -= d
    return lp


@njit(cache=True)
def _gamma_prior_log(x, g, o, shape, rate):
    """Ga(shape, rate) on exp(x[o]) plus the log-scale Jacobian."""
    lt = x[o]
    v = math.exp(lt)
    g[o] += (shape - 1.0) - rate * v + 1.0
    return shape * math.log(rate) - math.lgamma(shape) + (shape - 1.0) * lt - rate * v + lt


@njit(cache=True)
def _icar(x, g, off, rows, length, edges, rank, o_tau):
    lt = x[o_tau]
    tau = math.exp(lt)
    ss = 0.0
    for k in range(rows):
        base = off + k * length
        for e in range(edges.shape[0]):
            a = base + edges[e, 0]
            b = base + edges[e, 1]
            d = x[a] - x[b]
            ss += d * d
            g[a] -= tau * d
            g[b] += tau * d
    g[o_tau] += 0.5 * rows * rank - 0.5 * tau * ss
    return 0.5 * rows * rank * lt - 0.5 * tau * ss


@njit(cache=True)
def _lasso(x, g, off, rows, length, edges, o_f, o_s):
    lf = math.exp(x[o_f])
    ls = math.exp(x[o_s])
    s_fuse = 0.0
    s_sparse = 0.0
    for k in range(rows):
        base = off + k * length
        for j in range(length):
            v = x[base + j]
            s_sparse += abs(v)
            g[base + j] -= ls * _sign(v)
        for e in range(edges.shape[0]):
            a = base + edges[e, 0]
            b = base + edges[e, 1]
            d = x[a] - x[b]
            s_fuse += abs(d)
            sg = lf * _sign(d)
            g[a] -= sg
            g[b] += sg
    m = rows * edges.shape[0]
    g[o_f] += m - lf * s_fuse
    g[o_s] += rows * length - ls * s_sparse
    return m * x[o_f] + rows * length * x[o_s] - lf * s_fuse - ls * s_sparse


@njit(cache=True)
def _ar1(x, g, off, K, T, a, b, prec_of, g_logprec):
    """AR(1) rows; ``prec_of[k, t]`` is the precision of step t (t >= 1).

    Accumulates d/d log precision into ``g_logprec`` and returns
    (logp, d/da, d/db).
    """
    lp = 0.0
    da = 0.0
    db = 0.0
    for k in range(K):
        base = off + k * T
        v0 = x[base]
        lp += -0.5 * LOG_2PI - math.log(ANCHOR_SD) - 0.5 * (v0 / ANCHOR_SD) ** 2
        g[base] -= v0 / (ANCHOR_SD * ANCHOR_SD)
        for t in range(1, T):
            prec = prec_of[k, t]
            r = x[base + t] - a - b * x[base + t - 1]
            pr = prec * r
            lp += 0.5 * math.log(prec) - 0.5 * LOG_2PI - 0.5 * pr * r
            g[base + t] -= pr
            g[base + t - 1] += b * pr
            da += pr
            db += pr * x[base + t - 1]
            g_logprec[k, t] += 0.5 - 0.5 * pr * r
    return lp, da, db


@njit(cache=True)
def logp_grad(x, fam, n, T, K, P, off, obs_i, obs_t, y_obs, lgy1, log_theta, X,
              s_edges, s_rank, t_edges, t_rank, hyper):
    """Log posterior and gradient.

    ``off`` holds block offsets in the order alpha, gamma, psi, U, V, beta,
    log_phi_nb, log_tau_u, log_tau_v, ar_a, ar_b, log_sigma, log_lam_u_fuse,
    log_lam_u_sparse, log_lam_v_fuse, log_lam_v_sparse, log_phi_local,
    log_delta (-1 when absent). ``hyper`` is (soft_sd, gamma_shape,
    gamma_rate, nu, a1, a2, beta_sd) with beta_sd <= 0 meaning flat.
    """
    g = np.zeros(x.size)
    oa, og, ops, oU, oV, ob, olp = off[0], off[1], off[2], off[3], off[4], off[5], off[6]
    soft_sd, gshape, grate, nu, a1, a2, beta_sd = (hyper[0], hyper[1], hyper[2], hyper[3],
                                                  hyper[4], hyper[5], hyper[6])
    lphi = x[olp]
    phi = math.exp(lphi)
    dig_phi = digamma(phi)
    lg_phi = math.lgamma(phi)
    alpha = x[oa]

    lp = 0.0
    d_lphi = 0.0
    for c in range(y_obs.size):
        i = obs_i[c]
        t = obs_t[c]
        eta = alpha + x[og + i] + x[ops + t] + log_theta[i, t]
        for k in range(K):
            eta += x[oU + k * n + i] * x[oV + k * T + t]
        for p in range(P):
            eta += X[i, t, p] * x[ob + p]
        y = y_obs[c]
        log_mp = _logaddexp(eta, lphi)
        lp += (math.lgamma(y + phi) - lg_phi - lgy1[c]
               + phi * (lphi - log_mp) + y * (eta - log_mp))
        frac = math.exp(eta - log_mp)
        ge = y - (y + phi) * frac
        d_lphi += phi * (digamma(y + phi) - dig_phi + (lphi - log_mp) + frac
                         - y * math.exp(-log_mp))
        g[oa] += ge
        g[og + i] += ge
        g[ops + t] += ge
        for k in range(K):
            g[oU + k * n + i] += ge * x[oV + k * T + t]
            g[oV + k * T + t] += ge * x[oU + k * n + i]
        for p in range(P):
            g[ob + p] += ge * X[i, t, p]

    lp += -0.5 * lphi * lphi - 0.5 * LOG_2PI
    g[olp] += d_lphi - lphi

    if beta_sd > 0.0:
        for p in range(P):
            bv = x[ob + p]
            lp += -0.5 * LOG_2PI - math.log(beta_sd) - 0.5 * (bv / beta_sd) ** 2
            g[ob + p] -= bv / (beta_sd * beta_sd)

    lp += _soft_mean(x, g, og, 1, n, soft_sd)
    lp += _soft_mean(x, g, ops, 1, T, soft_sd)

    if fam == 0 or fam == 1:
        for j in range(K * T):
            v = x[oV + j]
            lp += -0.5 * v * v - 0.5 * LOG_2PI
            g[oV + j] -= v
    if fam == 0:
        for j in range(K * n):
            u = x[oU + j]
            lp += -0.5 * u * u - 0.5 * LOG_2PI
            g[oU + j] -= u
    if fam == 1 or fam == 2 or fam == 3 or fam == 5:
        lp += _icar(x, g, oU, K, n, s_edges, s_rank, off[7])
        lp += _gamma_prior_log(x, g, off[7], gshape, grate)
    if fam == 2:
        lp += _icar(x, g, oV, K, T, t_edges, t_rank, off[8])
        lp += _gamma_prior_log(x, g, off[8], gshape, grate)
    if fam == 3:
        ls = x[off[11]]
        prec = np.full((K, T), math.exp(-2.0 * ls))
        g_lp = np.zeros((K, T))
        lpa, da, db = _ar1(x, g, oV, K, T, x[off[9]], x[off[10]], prec, g_lp)
        lp += lpa + ls
        g[off[9]] += da
        g[off[10]] += db
        # d log prec / d log sigma = -2; +1 for the Jacobian of the flat prior on sigma
        g[off[11]] += -2.0 * g_lp.sum() + 1.0
    if fam == 4:
        lp += _lasso(x, g, oU, K, n, s_edges, off[12], off[13])
        lp += _gamma_prior_log(x, g, off[12], gshape, grate)
        lp += _gamma_prior_log(x, g, off[13], gshape, grate)
        lp += _lasso(x, g, oV, K, T, t_edges, off[14], off[15])
        lp += _gamma_prior_log(x, g, off[14], gshape, grate)
        lp += _gamma_prior_log(x, g, off[15], gshape, grate)
    if fam == 5:
        oph = off[16]
        odl = off[17]
        prec = np.empty((K, T))
        eta_k = 1.0
        for k in range(K):
            eta_k *= math.exp(x[odl + k])
            for t in range(T):
                prec[k, t] = math.exp(x[oph + k * T + t]) * eta_k
        g_lp = np.zeros((K, T))
        lpa, da, db = _ar1(x, g, oV, K, T, x[off[9]], x[off[10]], prec, g_lp)
        lp += lpa
        g[off[9]] += da
        g[off[10]] += db
        half = 0.5 * nu
        # d log prec_kt / d log delta_l = 1 for l <= k
        tail = 0.0
        for k in range(K - 1, -1, -1):
            row = 0.0
            for t in range(1, T):
                row += g_lp[k, t]
                g[oph + k * T + t] += g_lp[k, t]
            tail += row
            g[odl + k] += tail
        for j in range(K * T):
            lx = x[oph + j]
            v = math.exp(lx)
            lp += (half * math.log(half) - math.lgamma(half) + (half - 1.0) * lx - half * v + lx)
            g[oph + j] += (half - 1.0) - half * v + 1.0
        for k in range(K):
            shape = a1 if k == 0 else a2
            lx = x[odl + k]
            v = math.exp(lx)
            lp += -math.lgamma(shape) + (shape - 1.0) * lx - v + lx
            g[odl + k] += (shape - 1.0) - v + 1.0
    if fam != 0:
        lp += _soft_mean(x, g, oU, K, n, soft_sd)
        lp += _soft_mean(x, g, oV, K, T, soft_sd)
    if not math.isfinite(lp):
        lp = -math.inf
    return lp, g


# sampler coordinates -------------------------------------------------------------
#
# The sampler works in non-centred coordinates where the prior induces a
# funnel: AR-type factor rows are generated from standardised innovations
# (V_t = a + b V_{t-1} + sd_t z_t) and fused-Laplace blocks are expressed
# in units of their sparsity scale (U = z / lambda_sparse). ``to_model``
# maps a sampler vector to the model vector; ``logp_grad_sampler`` adds
# the log-Jacobian and pulls the gradient back.


@njit(cache=True)
def _step_sd(x, fam, K, T, off, out):
    """Innovation sd of V[k, t] (t >= 1) for the AR families."""
    if fam == 3:
        sd = math.exp(x[off[11]])
        for k in range(K):
            for t in range(T):
                out[k, t] = sd
    else:
        oph = off[16]
        log_eta = 0.0
        for k in range(K):
            log_eta += x[off[17] + k]
            for t in range(T):
                out[k, t] = math.exp(-0.5 * (x[oph + k * T + t] + log_eta))


@njit(cache=True)
def to_model(x, fam, n, T, K, off):
    y = x.copy()
    if fam == 3 or fam == 5:
        sd = np.empty((K, T))
        _step_sd(x, fam, K, T, off, sd)
        a = x[off[9]]
        b = x[off[10]]
        oV = off[4]
        for k in range(K):
            base = oV + k * T
            for t in range(1, T):
                y[base + t] = a + b * y[base + t - 1] + sd[k, t] * x[base + t]
    elif fam == 4:
        su = math.exp(-x[off[13]])
        sv = math.exp(-x[off[15]])
        for j in range(K * n):
            y[off[3] + j] = x[off[3] + j] * su
        for j in range(K * T):
            y[off[4] + j] = x[off[4] + j] * sv
    return y


@njit(cache=True)
def from_model(y, fam, n, T, K, off):
    """Inverse of :func:`to_model`."""
    x = y.copy()
    if fam == 3 or fam == 5:
        sd = np.empty((K, T))
        _step_sd(y, fam, K, T, off, sd)
        a = y[off[9]]
        b = y[off[10]]
        oV = off[4]
        for k in range(K):
            base = oV + k * T
            for t in range(1, T):
                x[base + t] = (y[base + t] - a - b * y[base + t - 1]) / sd[k, t]
    elif fam == 4:
        su = math.exp(x[off[13]])
        sv = math.exp(x[off[15]])
        for j in range(K * n):
            x[off[3] + j] = y[off[3] + j] * su
        for j in range(K * T):
            x[off[4] + j] = y[off[4] + j] * sv
    return x


@njit(cache=True)
def logp_grad_sampler(x, fam, n, T, K, P, off, obs_i, obs_t, y_obs, lgy1, log_theta, X,
                      s_edges, s_rank, t_edges, t_rank, hyper):
    """Log density and gradient in sampler coordinates."""
    if fam != 3 and fam != 4 and fam != 5:
        return logp_grad(x, fam, n, T, K, P, off, obs_i, obs_t, y_obs, lgy1, log_theta, X,
                         s_edges, s_rank, t_edges, t_rank, hyper)
    y = to_model(x, fam, n, T, K, off)
    lp, g = logp_grad(y, fam, n, T, K, P, off, obs_i, obs_t, y_obs, lgy1, log_theta, X,
                      s_edges, s_rank, t_edges, t_rank, hyper)
    gx = g.copy()
    if fam == 4:
        lsu = x[off[13]]
        lsv = x[off[15]]
        su = math.exp(-lsu)
        sv = math.exp(-lsv)
        acc_u = 0.0
        for j in range(K * n):
            o = off[3] + j
            gx[o] = g[o] * su
            acc_u -= g[o] * y[o]
        acc_v = 0.0
        for j in range(K * T):
            o = off[4] + j
            gx[o] = g[o] * sv
            acc_v -= g[o] * y[o]
        lp += -K * n * lsu - K * T * lsv
        gx[off[13]] += acc_u - K * n
        gx[off[15]] += acc_v - K * T
    else:
        sd = np.empty((K, T))
        _step_sd(x, fam, K, T, off, sd)
        b = x[off[10]]
        oV = off[4]
        q = np.zeros((K, T))  # d/d log sd_kt, Jacobian included
        ga = 0.0
        gb = 0.0
        for k in range(K):
            base = oV + k * T
            adj = 0.0
            for t in range(T - 1, -1, -1):
                adj = g[base + t] + b * adj
                if t == 0:
                    gx[base] = adj
                else:
                    gx[base + t] = adj * sd[k, t]
                    ga += adj
                    gb += adj * y[base + t - 1]
                    q[k, t] = adj * sd[k, t] * x[base + t] + 1.0
                    lp += math.log(sd[k, t])
        gx[off[9]] += ga
        gx[off[10]] += gb
        if fam == 3:
            gx[off[11]] += q.sum()
        else:
            oph = off[16]
            tail = 0.0
            for k in range(K - 1, -1, -1):
                row = 0.0
                for t in range(1, T):
                    gx[oph + k * T + t] -= 0.5 * q[k, t]
                    row += q[k, t]
                tail += row
                gx[off[17] + k] -= 0.5 * tail
    if not math.isfinite(lp):
        lp = -math.inf
    return lp, gx
