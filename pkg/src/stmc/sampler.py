"""No-U-Turn Hamiltonian Monte Carlo with warmup adaptation.

The transition is the multinomial variant of NUTS: trajectories are doubled
in a random direction until the generalised U-turn criterion fires, the
next state is drawn from the trajectory with weights ``exp(-H)``, and the
top-level doubling uses biased progressive sampling. Step size is tuned by
dual averaging towards ``target_accept``; a diagonal inverse metric is
estimated in Stan-style expanding windows during warmup.

Chains are deterministic given ``(seed, chain index)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0

LogpGrad = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class SamplerError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    iterations: int = 2000
    warmup: int = 1000
    chains: int = 4
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0
    guard_threshold: float = 20.0

    def __post_init__(self):
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("need 0 <= warmup < iterations")
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")

    @property
    def kept(self) -> int:
        return self.iterations - self.warmup


@dataclass
class ChainResult:
    draws: np.ndarray            # (kept, dim)
    accept_stat: np.ndarray      # (kept,)
    tree_depth: np.ndarray       # (kept,)
    n_leapfrog: np.ndarray       # (kept,)
    divergent: np.ndarray        # (kept,) bool
    step_size: float
    inv_metric: np.ndarray
    warmup_divergences: int


class _Tree:
    __slots__ = ("x_l", "p_l", "g_l", "x_r", "p_r", "g_r", "x_s", "lp_s", "g_s",
                 "log_w", "rho", "turning", "diverging", "sum_accept", "n")


class _Span:
    """End momenta and momentum sum of the trajectory built so far."""
    __slots__ = ("p_l", "p_r", "rho")

    def __init__(self, p_l, p_r, rho):
        self.p_l, self.p_r, self.rho = p_l, p_r, rho


class NUTS:
    """One chain's transition kernel for a fixed target."""

    def __init__(self, logp_grad: LogpGrad, dim: int, rng: np.random.Generator,
                 max_tree_depth: int = 10):
        self.logp_grad = logp_grad
        self.dim = dim
        self.rng = rng
        self.max_tree_depth = max_tree_depth
        self.inv_metric = np.ones(dim)
        self.step_size = 1.0

    def _leapfrog(self, x, p, g, eps):
        p = p + 0.5 * eps * g
        x = x + eps * self.inv_metric * p
        lp, g = self.logp_grad(x)
        p = p + 0.5 * eps * g
        return x, p, g, lp

    def _kinetic(self, p):
        return 0.5 * float(np.dot(p, self.inv_metric * p))

    def _turning(self, p_l, p_r, rho):
        im = self.inv_metric
        return float(np.dot(im * p_l, rho)) <= 0.0 or float(np.dot(im * p_r, rho)) <= 0.0

    def _merged_turning(self, bck, fwd):
        """U-turn test for the join of two adjacent subtrees ``bck`` then ``fwd``.

        Besides the whole span, checks the backward subtree extended by the
        first state of the forward one and vice versa, which catches
        trajectories that loop past a U-turn in low dimensions.
        """
        rho = bck.rho + fwd.rho
        return (self._turning(bck.p_l, fwd.p_r, rho)
                or self._turning(bck.p_l, fwd.p_l, bck.rho + fwd.p_l)
                or self._turning(bck.p_r, fwd.p_r, fwd.rho + bck.p_r))

    def _build(self, x, p, g, depth, direction, eps, h0):
        if depth == 0:
            x1, p1, g1, lp1 = self._leapfrog(x, p, g, direction * eps)
            h = -lp1 + self._kinetic(p1) if np.isfinite(lp1) else np.inf
            if not np.isfinite(h):
                h = np.inf
            t = _Tree()
            t.x_l = t.x_r = t.x_s = x1
            t.p_l = t.p_r = p1
            t.g_l = t.g_r = t.g_s = g1
            t.lp_s = lp1
            t.log_w = h0 - h
            t.rho = p1.copy()
            t.turning = False
            t.diverging = h - h0 > DIVERGENCE_THRESHOLD
            t.sum_accept = min(1.0, np.exp(h0 - h)) if np.isfinite(h) else 0.0
            t.n = 1
            return t
        inner = self._build(x, p, g, depth - 1, direction, eps, h0)
        if inner.turning or inner.diverging:
            return inner
        if direction > 0:
            outer = self._build(inner.x_r, inner.p_r, inner.g_r, depth - 1, direction, eps, h0)
        else:
            outer = self._build(inner.x_l, inner.p_l, inner.g_l, depth - 1, direction, eps, h0)
        inner.sum_accept += outer.sum_accept
        inner.n += outer.n
        if outer.turning or outer.diverging:
            inner.turning, inner.diverging = outer.turning, outer.diverging
            return inner
        log_w = np.logaddexp(inner.log_w, outer.log_w)
        if np.log(self.rng.uniform()) < outer.log_w - log_w:
            inner.x_s, inner.lp_s, inner.g_s = outer.x_s, outer.lp_s, outer.g_s
        inner.log_w = log_w
        turning = (self._merged_turning(inner, outer) if direction > 0
                   else self._merged_turning(outer, inner))
        if direction > 0:
            inner.x_r, inner.p_r, inner.g_r = outer.x_r, outer.p_r, outer.g_r
        else:
            inner.x_l, inner.p_l, inner.g_l = outer.x_l, outer.p_l, outer.g_l
        inner.rho = inner.rho + outer.rho
        inner.turning = turning
        return inner

    def transition(self, x, lp, g):
        """One NUTS step from ``x``; returns ``(x, lp, g, info)``."""
        eps = self.step_size
        p0 = self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)
        h0 = -lp + self._kinetic(p0)
        x_l = x_r = x
        p_l = p_r = p0
        g_l = g_r = g
        rho = p0.copy()
        x_s, lp_s, g_s = x, lp, g
        log_w = 0.0
        depth = 0
        sum_accept = 0.0
        n_steps = 0
        diverging = False
        while depth < self.max_tree_depth:
            direction = 1 if self.rng.uniform() < 0.5 else -1
            if direction > 0:
                t = self._build(x_r, p_r, g_r, depth, 1, eps, h0)
            else:
                t = self._build(x_l, p_l, g_l, depth, -1, eps, h0)
            sum_accept += t.sum_accept
            n_steps += t.n
            depth += 1
            if t.diverging:
                diverging = True
                break
            if t.turning:
                break
            if np.log(self.rng.uniform()) < t.log_w - log_w:
                x_s, lp_s, g_s = t.x_s, t.lp_s, t.g_s
            log_w = np.logaddexp(log_w, t.log_w)
            old = _Span(p_l, p_r, rho)
            turning = (self._merged_turning(old, t) if direction > 0
                       else self._merged_turning(t, old))
            if direction > 0:
                x_r, p_r, g_r = t.x_r, t.p_r, t.g_r
            else:
                x_l, p_l, g_l = t.x_l, t.p_l, t.g_l
            rho = rho + t.rho
            if turning:
                break
        info = {"accept_stat": sum_accept / max(n_steps, 1), "depth": depth,
                "n_leapfrog": n_steps, "divergent": diverging}
        return x_s, lp_s, g_s, info

    def find_reasonable_step_size(self, x, lp, g):
        eps = self.step_size
        p = self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)
        h0 = -lp + self._kinetic(p)

        def delta_h(e):
            _, p1, _, lp1 = self._leapfrog(x, p, g, e)
            if not np.isfinite(lp1):
                return -np.inf
            return h0 - (-lp1 + self._kinetic(p1))

        direction = 1 if delta_h(eps) > np.log(0.8) else -1
        for _ in range(100):
            eps_new = eps * (2.0 ** direction)
            dh = delta_h(eps_new)
            if direction > 0 and not dh > np.log(0.8):
                break
            eps = eps_new
            if direction < 0 and dh > np.log(0.8):
                break
        self.step_size = eps
        return eps


class DualAveraging:
    def __init__(self, step_size, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.restart(step_size)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa

    def restart(self, step_size):
        self.mu = np.log(10.0 * step_size)
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.count = 0

    def update(self, accept_stat):
        self.count += 1
        m = self.count
        w = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_stat)
        log_eps = self.mu - np.sqrt(m) / self.gamma * self.h_bar
        eta = m ** -self.kappa
        self.log_eps_bar = eta * log_eps + (1.0 - eta) * self.log_eps_bar
        return float(np.exp(log_eps))

    @property
    def final(self):
        return float(np.exp(self.log_eps_bar))


def adaptation_windows(warmup: int, init_buffer=75, term_buffer=50, base_window=25):
    """End iterations (exclusive) of the metric-estimation windows.

    Follows the usual expanding-window schedule; for short warmups the
    buffers shrink to 15% / 75% / 10% of the warmup.
    """
    if warmup < 20:
        return []
    if init_buffer + base_window + term_buffer > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base_window = warmup - init_buffer - term_buffer
    ends = []
    start = init_buffer
    size = base_window
    last = warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        ends.append((start, end))
        start = end
        size *= 2
    return ends


def run_chain(logp_grad: LogpGrad, x0: np.ndarray, cfg: SamplerConfig, chain: int,
              label: str = "") -> ChainResult:
    """Run one chain with warmup adaptation; returns the post-warmup draws."""
    rng = np.random.default_rng([cfg.seed, chain])
    x = np.asarray(x0, dtype=float).copy()
    dim = x.size
    lp, g = logp_grad(x)
    if not np.isfinite(lp):
        raise SamplerError(f"chain {chain}{label}: non-finite initial log posterior")
    kernel = NUTS(logp_grad, dim, rng, cfg.max_tree_depth)
    kernel.find_reasonable_step_size(x, lp, g)
    da = DualAveraging(kernel.step_size, cfg.target_accept)
    windows = adaptation_windows(cfg.warmup)
    window_ends = {end: start for start, end in windows}
    buf = []
    warm_div = 0

    kept = cfg.kept
    draws = np.empty((kept, dim))
    acc = np.empty(kept)
    depth = np.empty(kept, dtype=int)
    nlf = np.empty(kept, dtype=int)
    div = np.zeros(kept, dtype=bool)

    for it in range(cfg.iterations):
        x, lp, g, info = kernel.transition(x, lp, g)
        if it < cfg.warmup:
            warm_div += info["divergent"]
            kernel.step_size = da.update(info["accept_stat"])
            if kernel.step_size < 1e-12 or not np.isfinite(kernel.step_size):
                raise SamplerError(f"chain {chain}{label}: step size collapsed during warmup "
                                   f"({warm_div} divergences in {it + 1} iterations)")
            if windows and any(s <= it < e for s, e in windows):
                buf.append(x)
            if it + 1 in window_ends:
                n = len(buf)
                var = np.var(np.asarray(buf), axis=0)
                kernel.inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                buf = []
                kernel.find_reasonable_step_size(x, lp, g)
                da.restart(kernel.step_size)
            if it + 1 == cfg.warmup:
                kernel.step_size = da.final
        else:
            j = it - cfg.warmup
            draws[j] = x
            acc[j] = info["accept_stat"]
            depth[j] = info["depth"]
            nlf[j] = info["n_leapfrog"]
            div[j] = info["divergent"]
    if cfg.warmup and warm_div == cfg.warmup:
        raise SamplerError(f"chain {chain}{label}: every warmup transition diverged")
    return ChainResult(draws, acc, depth, nlf, div, kernel.step_size,
                       kernel.inv_metric.copy(), warm_div)


@dataclass
class DrawSet:
    """Posterior draws from several chains plus optional predictive draws.

    ``params`` has shape ``(chains, kept, dim)``. ``predictive`` has shape
    ``(chains, kept, n_cells)`` for the ``(unit, time)`` index pairs in
    ``cells``; a row of ``-1`` marks a draw where the numerical guard fired.
    """

    params: np.ndarray
    names: list
    accept_stat: np.ndarray
    divergences: np.ndarray
    step_size: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    predictive: np.ndarray | None = None
    cells: np.ndarray | None = None
    guard_fired: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self) -> int:
        return self.params.shape[0]

    @property
    def kept(self) -> int:
        return self.params.shape[1]

    def param(self, name: str) -> np.ndarray:
        """(chains, kept) draws of one flat parameter name, e.g. ``'alpha'`` or ``'U[0,3]'``."""
        return self.params[:, :, self.names.index(name)]


def sample(logp_grad: LogpGrad, inits: Sequence[np.ndarray], cfg: SamplerConfig,
           names: Sequence[str] | None = None) -> DrawSet:
    """Run ``len(inits)`` chains of NUTS on an arbitrary differentiable target."""
    results = [run_chain(logp_grad, x0, cfg, c) for c, x0 in enumerate(inits)]
    dim = results[0].draws.shape[1]
    return DrawSet(
        params=np.stack([r.draws for r in results]),
        names=list(names) if names is not None else [f"x[{j}]" for j in range(dim)],
        accept_stat=np.stack([r.accept_stat for r in results]),
        divergences=np.array([int(r.divergent.sum()) for r in results]),
        step_size=np.array([r.step_size for r in results]),
        tree_depth=np.stack([r.tree_depth for r in results]),
        n_leapfrog=np.stack([r.n_leapfrog for r in results]),
    )


def run_chains(spec, panel, cfg: SamplerConfig) -> DrawSet:
    """Fit ``spec`` to a masked panel: one NUTS chain per ``cfg.chains``.

    Initial states come from :func:`stmc.model.init_state` with an rng
    stream per chain, so the result is a pure function of ``cfg.seed``.
    Sampling runs in the posterior's non-centred coordinates; the returned
    draws are on the model scale.
    """
    from .model import Posterior, init_state

    post = Posterior(spec, panel)
    inits = []
    for c in range(cfg.chains):
        rng = np.random.default_rng([cfg.seed, c, 1])
        inits.append(post.from_model(post.layout.pack(init_state(spec, panel, rng))))
    draws = sample(post.sampler_logp_grad, inits, cfg, post.layout.flat_names())
    draws.params = post.to_model(draws.params)
    draws.meta.update(family=spec.family, K=spec.K, seed=cfg.seed,
                      iterations=cfg.iterations, warmup=cfg.warmup,
                      guard_threshold=cfg.guard_threshold)
    return draws


def posterior_predictive(draws: DrawSet, spec, panel, cells=None, seed: int = 0,
                         guard_threshold: float | None = None) -> DrawSet:
    """Fill ``draws.predictive`` with counterfactual draws at ``cells``.

    ``cells`` defaults to the masked cells of ``panel``. For each kept draw
    the linear predictor is evaluated at every cell; if any exceeds the
    guard threshold the whole row is set to ``-1``, otherwise each cell
    gets a negative binomial draw with that draw's dispersion. Parameter
    draws are left untouched.
    """
    from .model import Layout

    if guard_threshold is None:
        guard_threshold = draws.meta.get("guard_threshold", 20.0)
    if cells is None:
        cells = panel.masked_cells
    cells = np.asarray(cells, dtype=int).reshape(-1, 2)
    layout = Layout.for_spec(spec, panel.n_units, panel.n_times, panel.n_covariates)
    chains, kept, _ = draws.params.shape
    out = np.empty((chains, kept, len(cells)))
    fired = np.zeros((chains, kept), dtype=bool)
    ii, tt = cells[:, 0], cells[:, 1]
    log_theta = np.log(panel.populations[ii, tt])
    X = np.asarray(panel.covariates, dtype=float)[ii, tt] if panel.n_covariates else None
    for c in range(chains):
        rng = np.random.default_rng([seed, c, 2])
        for m in range(kept):
            s = layout.unpack(draws.params[c, m])
            eta = (s["alpha"] + s["gamma"][ii] + s["psi"][tt]
                   + np.einsum("kj,kj->j", s["U"][:, ii], s["V"][:, tt]) + log_theta)
            if X is not None:
                eta = eta + X @ s["beta"]
            if len(cells) and (not np.all(np.isfinite(eta)) or eta.max() > guard_threshold):
                out[c, m] = -1.0
                fired[c, m] = True
                continue
            phi = float(np.exp(s["log_phi_nb"]))
            mu = np.exp(eta)
            # NB2 as a gamma-Poisson mixture
            out[c, m] = rng.poisson(rng.gamma(phi, mu / phi))
    draws.predictive = out
    draws.cells = cells
    draws.guard_fired = fired
    return draws


# convergence diagnostics --------------------------------------------------------

def _split(x: np.ndarray) -> np.ndarray:
    """(chains, n) -> (2 chains, n // 2), dropping the middle draw when n is odd."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def _rhat_basic(x: np.ndarray) -> float:
    m, n = x.shape
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    r = stats.rankdata(x, method="average").reshape(x.shape)
    return stats.norm.ppf((r - 0.375) / (x.size + 0.25))


def _check(x, flag_name):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] < 4:
        raise ValueError(f"{flag_name} needs at least 4 draws per chain")
    if not np.all(np.isfinite(x)) or np.ptp(x) == 0:
        return x, True
    return x, False


def rhat(x, rank_normalized: bool = True) -> float:
    """Split R-hat for one scalar, ``x`` shaped ``(chains, draws)``.

    The rank-normalised version returns the larger of the bulk and the
    folded (tail) statistics. A constant or non-finite input returns
    ``nan``; callers treat that as 1 and flag it (see :func:`summarize`).
    """
    x, degenerate = _check(x, "rhat")
    if degenerate:
        return float("nan")
    xs = _split(x)
    if not rank_normalized:
        return _rhat_basic(xs)
    bulk = _rhat_basic(_rank_normalize(xs))
    folded = np.abs(xs - np.median(xs))
    tail = _rhat_basic(_rank_normalize(folded))
    return max(bulk, tail)


def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance of each row via FFT (biased estimator, lag 0..n-1)."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=1)[:, :n]
    return acov / n


def ess(x, rank_normalized: bool = True) -> float:
    """Bulk effective sample size of ``x`` shaped ``(chains, draws)``.

    Multi-chain autocorrelation combined with Geyer's initial monotone
    sequence on split chains. Constant input returns ``nan``.
    """
    x, degenerate = _check(x, "ess")
    if degenerate:
        return float("nan")
    xs = _split(x)
    if rank_normalized:
        xs = _rank_normalize(xs)
    m, n = xs.shape
    acov = _autocov(xs)
    mean_var = acov[:, 0].mean() * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += xs.mean(axis=1).var(ddof=1)
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sum adjacent pairs while positive, enforce monotone decrease
    pairs = rho[: 2 * (n // 2)].reshape(-1, 2).sum(axis=1)
    k = 0
    while k < len(pairs) and pairs[k] > 0:
        k += 1
    pairs = np.minimum.accumulate(pairs[:k]) if k else pairs[:0]
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def summarize(draws: DrawSet) -> dict:
    """R-hat and ESS per parameter plus the mean predictive R-hat over cells.

    With one chain the split halves provide the between-chain comparison.
    Degenerate (constant) quantities are counted in ``flagged`` and take
    R-hat 1 in the averages.
    """
    p = draws.params
    r = np.array([rhat(p[:, :, j]) for j in range(p.shape[2])])
    e = np.array([ess(p[:, :, j]) for j in range(p.shape[2])])
    out = {"param_rhat": r, "param_ess": e,
           "flagged": [draws.names[j] for j in np.flatnonzero(np.isnan(r))],
           "divergences": draws.divergences.tolist()}
    if draws.predictive is not None and draws.predictive.shape[2]:
        keep = ~draws.guard_fired
        pr = []
        for j in range(draws.predictive.shape[2]):
            v = draws.predictive[:, :, j]
            if keep.all():
                pr.append(rhat(v))
            else:
                # chains trimmed to a common length of unguarded rows
                n = keep.sum(axis=1).min()
                pr.append(rhat(np.stack([v[c][keep[c]][:n] for c in range(v.shape[0])]))
                          if n >= 4 else np.nan)
        pr = np.array(pr)
        out["predictive_rhat"] = pr
        out["mean_predictive_rhat"] = float(np.nanmean(np.where(np.isnan(pr), 1.0, pr)))
        out["guard_fraction"] = float(draws.guard_fired.mean())
    return out


# export --------------------------------------------------------------------------

def write_params_csv(draws: DrawSet, path, header: str = "") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iter", "parameter", "value"])
        for c in range(draws.n_chains):
            for m in range(draws.kept):
                for name, v in zip(draws.names, draws.params[c, m]):
                    w.writerow([c, m, name, repr(float(v))])


def write_predictive_csv(draws: DrawSet, panel, path, header: str = "") -> None:
    """Long predictive draws ``(chain, iter, unit, time, y0_draw)``; guarded rows carry -1."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iter", "unit", "time", "y0_draw"])
        units = [panel.unit_ids[i] for i in draws.cells[:, 0]]
        times = [panel.time_labels[t] for t in draws.cells[:, 1]]
        for c in range(draws.n_chains):
            for m in range(draws.kept):
                for u, t, v in zip(units, times, draws.predictive[c, m]):
                    w.writerow([c, m, u, t, f"{v:.0f}"])


def read_predictive_csv(path, panel):
    """Inverse of :func:`write_predictive_csv` -> ``(predictive, cells)``.

    ``predictive`` has shape ``(chains, kept, n_cells)``; a row is marked
    guarded when every cell is ``-1``.
    """
    uidx = {u: i for i, u in enumerate(panel.unit_ids)}
    tidx = {str(t): j for j, t in enumerate(panel.time_labels)}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, r in enumerate(csv.DictReader(ln for ln in fh if not ln.startswith("#")), 2):
            try:
                rows.append((int(r["chain"]), int(r["iter"]), uidx[r["unit"]],
                             tidx[r["time"]], float(r["y0_draw"])))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: unknown unit or time {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no predictive draws")
    a = np.array(rows)
    chains, kept = int(a[:, 0].max()) + 1, int(a[:, 1].max()) + 1
    cells = np.unique(a[:, 2:4].astype(int), axis=0)
    cpos = {(i, t): k for k, (i, t) in enumerate(map(tuple, cells))}
    out = np.full((chains, kept, len(cells)), np.nan)
    for c, m, i, t, v in rows:
        out[c, m, cpos[(i, t)]] = v
    if np.isnan(out).any():
        raise ValueError(f"{path}: predictive grid is incomplete")
    return out, cells
