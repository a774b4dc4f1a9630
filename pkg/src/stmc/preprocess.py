"""Temporal pre-smoothing of count series and the scree summary for choosing K."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .panel import PanelData

log = logging.getLogger(__name__)

MIN_LOG_MEAN = -30.0  # floor on fitted log means so zero runs stay finite


class SmoothingError(RuntimeError):
    pass


def natural_spline_basis(times, df: int) -> np.ndarray:
    """Natural cubic spline basis with ``df`` columns (no intercept column).

    Boundary knots sit at the extreme times and ``df - 1`` interior knots
    at equally spaced quantiles of ``times``. Built from the truncated-power
    representation ``N_1 = x``, ``N_{k+2} = d_k - d_{K-1}`` with
    ``d_k = ((x - xi_k)_+^3 - (x - xi_K)_+^3) / (xi_K - xi_k)`` over the
    full knot sequence ``xi``, which is linear beyond the boundary knots.
    Times are rescaled to [0, 1] first for conditioning; the column span is
    unchanged.
    """
    x = np.asarray(times, dtype=float)
    if df < 2:
        raise ValueError("df must be at least 2")
    if np.unique(x).size <= df:
        raise ValueError(f"need more than df={df} distinct times, got {np.unique(x).size}")
    lo, hi = x.min(), x.max()
    z = (x - lo) / (hi - lo)
    interior = np.quantile(z, np.linspace(0, 1, df + 1)[1:-1])
    knots = np.concatenate([[0.0], interior, [1.0]])
    return _truncated_power_natural(z, knots)


def _truncated_power_natural(z, knots):
    last = knots[-1]

    def d(k):
        return (np.clip(z - knots[k], 0, None) ** 3 - np.clip(z - last, 0, None) ** 3) / (last - knots[k])

    n_k = len(knots)
    cols = [z] + [d(k) - d(n_k - 2) for k in range(n_k - 2)]
    return np.column_stack(cols)


@dataclass
class SmoothResult:
    fitted: np.ndarray
    converged: bool
    iterations: int
    flag: str = ""


def smooth_series(counts, populations, df: int = 5, times=None, tol: float = 1e-8,
                  max_iter: int = 100) -> SmoothResult:
    """Poisson regression of ``counts`` on a natural spline in time with offset ``log(populations)``.

    Fitted by iteratively reweighted least squares until the relative
    deviance change is below ``tol``. An all-zero series is returned
    unchanged and flagged.
    """
    y = np.asarray(counts, dtype=float)
    theta = np.asarray(populations, dtype=float)
    if y.sum() <= 0:
        return SmoothResult(y.copy(), True, 0, "all-zero series left unsmoothed")
    t = np.arange(y.size, dtype=float) if times is None else np.asarray(times, dtype=float)
    X = np.column_stack([np.ones(y.size), natural_spline_basis(t, df)])
    off = np.log(theta)
    # start from the saturated-ish guess used by standard GLM software
    mu = y + 0.1 * y.mean() + 1e-3
    eta = np.log(mu)
    beta = None
    dev_old = np.inf
    for it in range(1, max_iter + 1):
        z = eta - off + (y - mu) / mu
        sw = np.sqrt(mu)
        step, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        # step-halving keeps the deviance finite and non-increasing; series with
        # runs of zeros push fitted values towards 0 and can overshoot
        for _ in range(30):
            new_eta = np.clip(X @ step + off, MIN_LOG_MEAN, None)
            new_mu = np.exp(new_eta)
            dev = _poisson_deviance(y, new_mu)
            if beta is None or (np.isfinite(dev) and dev <= dev_old * (1 + 1e-12) + 1e-12):
                break
            step = 0.5 * (step + beta)
        beta, eta, mu = step, new_eta, new_mu
        if abs(dev - dev_old) <= tol * (abs(dev) + 0.1):
            return SmoothResult(mu, True, it)
        dev_old = dev
    raise SmoothingError(f"IRLS did not converge in {max_iter} iterations")


def _poisson_deviance(y, mu):
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(term - (y - mu)))


def smooth_panel(panel: PanelData, df: int = 5) -> PanelData:
    """Smooth every unit's series over time; the result carries real-valued counts."""
    times = np.asarray(panel.time_labels, dtype=float)
    out = np.empty_like(panel.counts, dtype=float)
    for i in range(panel.n_units):
        res = smooth_series(panel.counts[i], panel.populations[i], df=df, times=times)
        if res.flag:
            log.info("unit %s: %s", panel.unit_ids[i], res.flag)
        out[i] = res.fitted
    return panel.with_counts(out, smoothed=True)


def scree(m) -> np.ndarray:
    """Fraction of variance carried by each principal component of ``m``.

    Columns are centred; fractions are the squared singular values over
    their sum, in descending order.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or not np.all(np.isfinite(m)):
        raise ValueError("scree needs a complete 2-d matrix")
    c = m - m.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    total = float(np.sum(s * s))
    if total <= 0:
        raise ValueError("matrix has zero variance")
    return s * s / total


def scree_matrix(panel: PanelData, denominator: float = 1e5) -> np.ndarray:
    """Rate matrix for :func:`scree`; treated cells take their column's untreated mean."""
    rates = panel.rates(denominator)
    obs = ~panel.treated
    col_mean = np.array([rates[obs[:, t], t].mean() if obs[:, t].any() else rates[:, t].mean()
                         for t in range(panel.n_times)])
    return np.where(obs, rates, col_mean[None, :])
