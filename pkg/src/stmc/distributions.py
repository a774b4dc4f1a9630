"""Log-density kernels with hand-derived gradients.

Every kernel returns ``(logp, grads)``; positive parameters are
differentiated on the log scale (``d logp / d log x``) because that is the
scale the sampler works on. Jacobian terms are *not* included here; the
posterior assembly in :mod:`stmc.model` adds them.

Negative binomial uses the NB2 form: mean ``mu``, dispersion ``phi``,
variance ``mu + mu**2 / phi``. Poisson is the ``phi -> inf`` limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .graphs import Adjacency

LOG_2PI = np.log(2.0 * np.pi)
AR1_ANCHOR_SD = 10.0


@dataclass(frozen=True)
class NegBinParams:
    mu: float | np.ndarray
    phi: float

    def __post_init__(self):
        if np.any(np.asarray(self.mu) <= 0) or self.phi <= 0:
            raise ValueError("negative binomial mean and dispersion must be positive")


def negbin_log_pmf(y, p: NegBinParams):
    """NB2 log pmf, elementwise in ``y`` and ``p.mu``.

    Returns ``(logp, dlogp_dlogmu, dlogp_dlogphi)`` with the same broadcast
    shape. ``y`` may be real-valued (smoothed counts); the log-gamma form
    is used throughout.
    """
    return _negbin(np.asarray(y, dtype=float), np.log(p.mu), np.log(p.phi))


def _negbin(y, log_mu, log_phi):
    mu = np.exp(log_mu)
    phi = np.exp(log_phi)
    log_mp = np.logaddexp(log_mu, log_phi)  # log(mu + phi)
    logp = (gammaln(y + phi) - gammaln(phi) - gammaln(y + 1.0)
            + phi * (log_phi - log_mp) + y * (log_mu - log_mp))
    frac = mu / (mu + phi)
    d_logmu = y - (y + phi) * frac
    d_logphi = phi * (digamma(y + phi) - digamma(phi) + (log_phi - log_mp) + frac - y / (mu + phi))
    return logp, d_logmu, d_logphi


def normal_logpdf(x, mean=0.0, sd=1.0):
    """Normal log density and gradients ``(logp, d/dx, d/dmean, d/dsd)``."""
    x = np.asarray(x, dtype=float)
    z = (x - mean) / sd
    logp = -0.5 * LOG_2PI - np.log(sd) - 0.5 * z * z
    d_x = -z / sd
    return logp, d_x, -d_x, (z * z - 1.0) / sd


def gamma_logpdf(x, shape, rate):
    """Gamma log density in shape-rate form, with ``(logp, d/dx, d/dlogx)``."""
    x = np.asarray(x, dtype=float)
    logp = shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
    d_x = (shape - 1.0) / x - rate
    return logp, d_x, d_x * x


def icar_log_density(u, adj: Adjacency, tau: float, rank: int | None = None):
    """Pairwise-difference ICAR log density for one or more rows.

    ``logp = rows * (rank / 2) log tau - (tau / 2) sum_edges (u_i - u_j)**2``,
    summed over the rows of ``u`` (shape ``(n,)`` or ``(K, n)``). Returns
    ``(logp, d/du, d/dlog tau)``.
    """
    u = np.asarray(u, dtype=float)
    if rank is None:
        rank = adj.icar_rank()
    u2 = np.atleast_2d(u)
    e = adj.edge_array
    diff = u2[:, e[:, 0]] - u2[:, e[:, 1]]
    ss = float(np.sum(diff * diff))
    rows = u2.shape[0]
    logp = 0.5 * rows * rank * np.log(tau) - 0.5 * tau * ss
    grad = np.zeros_like(u2)
    g = -tau * diff
    _scatter_rows(grad, e[:, 0], g)
    _scatter_rows(grad, e[:, 1], -g)
    return logp, grad.reshape(u.shape), 0.5 * rows * rank - 0.5 * tau * ss


def _scatter_rows(out, idx, vals):
    for k in range(out.shape[0]):
        out[k] += np.bincount(idx, weights=vals[k], minlength=out.shape[1])


def ar1_rows(v, a, b, precision):
    """AR(1) log density for each row of ``v`` with per-innovation precisions.

    ``v`` has shape ``(K, T)``; ``precision`` broadcasts to ``(K, T - 1)`` and
    holds the precision of ``v[:, t]`` given ``v[:, t - 1]``. The first
    column gets a diffuse ``N(0, AR1_ANCHOR_SD**2)`` anchor.

    Returns ``(logp, d/dv, d/da, d/db, d/dprecision)``; the last has the
    broadcast shape ``(K, T - 1)``.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    prec = np.broadcast_to(precision, (v.shape[0], v.shape[1] - 1))
    resid = v[:, 1:] - a - b * v[:, :-1]
    pr = prec * resid
    logp = float(np.sum(0.5 * np.log(prec) - 0.5 * LOG_2PI - 0.5 * pr * resid))
    anchor, d_anchor, _, _ = normal_logpdf(v[:, 0], 0.0, AR1_ANCHOR_SD)
    logp += float(np.sum(anchor))
    grad = np.zeros_like(v)
    grad[:, 0] = d_anchor
    grad[:, 1:] -= pr
    grad[:, :-1] += b * pr
    d_a = float(np.sum(pr))
    d_b = float(np.sum(pr * v[:, :-1]))
    d_prec = 0.5 / prec - 0.5 * resid * resid
    return logp, grad, d_a, d_b, d_prec


def ar1_log_density(v, a: float, b: float, sigma: float):
    """AR(1) prior ``v_t ~ N(a + b v_{t-1}, sigma)`` with a diffuse anchor on ``v_1``.

    Accepts one series or a ``(K, T)`` stack sharing ``(a, b, sigma)``.
    Returns ``(logp, d/dv, d/da, d/db, d/dlog sigma)``.
    """
    v_in = np.asarray(v, dtype=float)
    logp, grad, d_a, d_b, d_prec = ar1_rows(v_in, a, b, sigma ** -2)
    # d prec / d log sigma = -2 prec
    d_logsigma = float(np.sum(d_prec)) * (-2.0 * sigma ** -2)
    return logp, grad.reshape(v_in.shape), d_a, d_b, d_logsigma


def fused_laplace_log_density(x, adj: Adjacency, lambda_fuse: float, lambda_sparse: float):
    """Fused-lasso prior on each row of ``x``.

    ``-lambda_fuse sum_edges |x_i - x_j| - lambda_sparse sum_i |x_i|`` plus
    ``n_edges log lambda_fuse + n log lambda_sparse`` per row, the
    normaliser of the product of independent Laplace factors (it makes the
    Gamma prior on each rate conjugate). Subgradient uses sign(0) = 0.

    Returns ``(logp, d/dx, d/dlog lambda_fuse, d/dlog lambda_sparse)``.
    """
    x = np.asarray(x, dtype=float)
    x2 = np.atleast_2d(x)
    rows, n = x2.shape
    e = adj.edge_array
    diff = x2[:, e[:, 0]] - x2[:, e[:, 1]]
    s_fuse = float(np.abs(diff).sum())
    s_sparse = float(np.abs(x2).sum())
    m = rows * adj.n_edges
    logp = (m * np.log(lambda_fuse) + rows * n * np.log(lambda_sparse)
            - lambda_fuse * s_fuse - lambda_sparse * s_sparse)
    grad = -lambda_sparse * np.sign(x2)
    sd = -lambda_fuse * np.sign(diff)
    _scatter_rows(grad, e[:, 0], sd)
    _scatter_rows(grad, e[:, 1], -sd)
    return (logp, grad.reshape(x.shape), m - lambda_fuse * s_fuse,
            rows * n - lambda_sparse * s_sparse)


@dataclass
class ShrinkageState:
    """Multiplicative gamma shrinkage parameters for K factor rows.

    ``phi_local`` has shape ``(K, T)``; ``delta`` has length ``K``.
    ``eta[k] = prod(delta[:k + 1])`` is the row-level global precision.
    """

    phi_local: np.ndarray
    delta: np.ndarray
    nu: float = 3.0
    a1: float = 2.0
    a2: float = 3.0

    def __post_init__(self):
        if self.a2 <= 1:
            raise ValueError("multiplicative gamma shrinkage needs a2 > 1")

    @property
    def eta(self) -> np.ndarray:
        return np.cumprod(self.delta)


def shrinkage_ar1_log_density(v, a: float, b: float, state: ShrinkageState):
    """AR(1) rows with innovation variance ``1 / (phi_kt eta_k)`` plus the shrinkage hyperpriors.

    ``phi_kt ~ Ga(nu/2, nu/2)``, ``delta_1 ~ Ga(a1, 1)``, ``delta_l ~ Ga(a2, 1)``.
    Column ``t = 0`` of ``phi_local`` only enters through its prior (the
    first factor value carries the diffuse anchor).

    Returns ``(logp, d/dv, d/da, d/db, d/dlog phi_local, d/dlog delta)``.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    phi = np.asarray(state.phi_local, dtype=float)
    delta = np.asarray(state.delta, dtype=float)
    eta = np.cumprod(delta)
    prec = phi[:, 1:] * eta[:, None]
    logp, grad, d_a, d_b, d_prec = ar1_rows(v, a, b, prec)
    g_logprec = d_prec * prec
    d_logphi = np.zeros_like(phi)
    d_logphi[:, 1:] = g_logprec
    # d log prec_kt / d log delta_l = 1 for l <= k
    row_tot = g_logprec.sum(axis=1)
    d_logdelta = np.cumsum(row_tot[::-1])[::-1].copy()

    lp_phi, _, dl_phi = gamma_logpdf(phi, state.nu / 2.0, state.nu / 2.0)
    shapes = np.full(delta.shape, state.a2)
    shapes[0] = state.a1
    lp_delta, _, dl_delta = gamma_logpdf(delta, shapes, 1.0)
    logp += float(lp_phi.sum() + lp_delta.sum())
    d_logphi += dl_phi
    d_logdelta += dl_delta
    return logp, grad, d_a, d_b, d_logphi, d_logdelta
