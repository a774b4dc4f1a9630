"""Joint log posterior and gradient for the six matrix-completion models.

Mean model for cell ``(i, t)``::

    log E[Y_it(0)] = alpha + gamma_i + psi_t + U_i' V_t + X_it' beta + log theta_it

with a negative binomial likelihood over the observed (untreated) cells.
The families differ only in the priors placed on the rows of ``U`` and
``V``:

====================  =====================  ==============================
family                prior on U_k           prior on V_k
====================  =====================  ==============================
vanilla               N(0, 1)                N(0, 1)
space                 spatial ICAR           N(0, 1)
space_time_icar       spatial ICAR           temporal ICAR
space_time_ar         spatial ICAR           AR(1)
space_time_lasso      fused Laplace          fused Laplace
space_time_shrinkage  spatial ICAR           AR(1) with multiplicative
                                             gamma shrinkage
====================  =====================  ==============================

All positive scalars are sampled on the log scale; the log-Jacobian is
included in the posterior.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np
from scipy import stats
from scipy.special import gammaln

from . import _kernels
from . import distributions as dist
from .graphs import Adjacency, path_adjacency
from .panel import MaskedPanel

FAMILIES = (
    "vanilla",
    "space",
    "space_time_icar",
    "space_time_ar",
    "space_time_lasso",
    "space_time_shrinkage",
)

_ALIASES = {
    "1": "vanilla", "vanilla": "vanilla",
    "2": "space", "space": "space", "spatial": "space",
    "3": "space_time_icar", "spacetimeicar": "space_time_icar",
    "4": "space_time_ar", "spacetimear": "space_time_ar",
    "5": "space_time_lasso", "spacetimelasso": "space_time_lasso",
    "6": "space_time_shrinkage", "spacetimeshrinkage": "space_time_shrinkage",
}

ParameterState = Dict[str, np.ndarray]


class ModelError(ValueError):
    pass


def canonical_family(name: str) -> str:
    key = str(name).strip().lower().replace("-", "").replace(" ", "")
    if key in FAMILIES:
        return key
    key = key.replace("_", "")
    if key in _ALIASES:
        return _ALIASES[key]
    raise ModelError(f"unknown model family {name!r}; expected one of {', '.join(FAMILIES)}")


@dataclass
class ModelSpec:
    """Which prior family to fit and its hyperparameters.

    ``gamma_shape``/``gamma_rate`` define the Ga prior (shape-rate) on every
    ICAR precision and every Laplace rate. ``soft_sd`` is the sd of the
    normal prior on each factor row mean (all families but vanilla) and on
    the means of the unit and time intercepts. ``beta_sd=None`` means a flat
    prior on covariate coefficients.
    """

    family: str
    K: int
    spatial_adjacency: Adjacency | None = None
    nu: float = 3.0
    a1: float = 2.0
    a2: float = 3.0
    gamma_shape: float = 1.0
    gamma_rate: float = 0.01
    soft_sd: float = 0.1
    beta_sd: float | None = None

    def __post_init__(self):
        self.family = canonical_family(self.family)
        if self.K < 1:
            raise ModelError("K must be a positive integer")
        if self.family != "vanilla" and self.spatial_adjacency is None:
            raise ModelError(f"family {self.family!r} requires a spatial adjacency")
        if self.a2 <= 1:
            raise ModelError("shrinkage prior requires a2 > 1")

    def check_panel(self, n_units: int, n_times: int) -> None:
        if self.K > min(n_units, n_times):
            raise ModelError(f"K={self.K} exceeds min(N, T)={min(n_units, n_times)}")
        if self.spatial_adjacency is not None and self.spatial_adjacency.size != n_units:
            raise ModelError("spatial adjacency size does not match the number of units")

    def to_config(self) -> dict:
        return {"family": self.family, "k": self.K, "nu": self.nu, "a1": self.a1, "a2": self.a2,
                "soft_sd": self.soft_sd, "gamma_shape": self.gamma_shape, "gamma_rate": self.gamma_rate}

    @classmethod
    def from_config(cls, cfg: dict, spatial_adjacency: Adjacency | None = None) -> "ModelSpec":
        kw = {"family": cfg["family"], "K": int(cfg["k"]), "spatial_adjacency": spatial_adjacency}
        for key, name in (("nu", "nu"), ("a1", "a1"), ("a2", "a2"), ("soft_sd", "soft_sd"),
                          ("gamma_shape", "gamma_shape"), ("gamma_rate", "gamma_rate")):
            if key in cfg:
                kw[name] = float(cfg[key])
        return cls(**kw)


_FAMILY_SCALARS = {
    "vanilla": [],
    "space": [("log_tau_u", ())],
    "space_time_icar": [("log_tau_u", ()), ("log_tau_v", ())],
    "space_time_ar": [("log_tau_u", ()), ("ar_a", ()), ("ar_b", ()), ("log_sigma", ())],
    "space_time_lasso": [("log_lam_u_fuse", ()), ("log_lam_u_sparse", ()),
                         ("log_lam_v_fuse", ()), ("log_lam_v_sparse", ())],
    "space_time_shrinkage": [("log_tau_u", ()), ("ar_a", ()), ("ar_b", ())],
}


@dataclass
class Layout:
    """Maps named parameter blocks to slices of the packed vector."""

    blocks: list
    slices: dict = field(init=False)
    size: int = field(init=False)

    def __post_init__(self):
        self.slices = {}
        pos = 0
        for name, shape in self.blocks:
            n = int(np.prod(shape)) if shape else 1
            self.slices[name] = (slice(pos, pos + n), shape)
            pos += n
        self.size = pos

    @classmethod
    def for_spec(cls, spec: ModelSpec, n_units: int, n_times: int, n_cov: int) -> "Layout":
        K = spec.K
        blocks = [("alpha", ()), ("gamma", (n_units,)), ("psi", (n_times,)),
                  ("U", (K, n_units)), ("V", (K, n_times)), ("beta", (n_cov,)),
                  ("log_phi_nb", ())]
        blocks += _FAMILY_SCALARS[spec.family]
        if spec.family == "space_time_shrinkage":
            blocks += [("log_phi_local", (K, n_times)), ("log_delta", (K,))]
        return cls(blocks)

    @property
    def names(self) -> list[str]:
        return [b[0] for b in self.blocks]

    def unpack(self, x: np.ndarray) -> ParameterState:
        out = {}
        for name, (sl, shape) in self.slices.items():
            out[name] = x[sl].reshape(shape)
        return out

    def pack(self, state: ParameterState) -> np.ndarray:
        x = np.empty(self.size)
        for name, (sl, shape) in self.slices.items():
            x[sl] = np.asarray(state[name], dtype=float).ravel()
        return x

    def flat_names(self) -> list[str]:
        """One label per packed coordinate, e.g. ``U[1,4]`` (0-based)."""
        out = []
        for name, shape in self.blocks:
            if not shape:
                out.append(name)
            else:
                for idx in np.ndindex(*shape):
                    out.append(f"{name}[{','.join(map(str, idx))}]")
        return out

    def owner(self, j: int) -> str:
        return self.flat_names()[j]


class Posterior:
    """Log posterior of one model spec on one masked panel.

    Built once per fit; :meth:`logp_grad` is the hot path used by the sampler.
    """

    def __init__(self, spec: ModelSpec, panel: MaskedPanel):
        spec.check_panel(panel.n_units, panel.n_times)
        self.spec = spec
        self.panel = panel
        n, t, p = panel.n_units, panel.n_times, panel.n_covariates
        self.shape = (n, t)
        self.layout = Layout.for_spec(spec, n, t, p)
        self.obs_idx = np.flatnonzero(panel.observed.ravel())
        self.y_obs = np.asarray(panel.counts, dtype=float).ravel()[self.obs_idx]
        self.log_theta = np.log(panel.populations)
        self.X = np.asarray(panel.covariates, dtype=float)
        self.has_cov = p > 0
        self.s_adj = spec.spatial_adjacency
        self.s_rank = self.s_adj.icar_rank() if self.s_adj is not None else 0
        self.t_adj = path_adjacency(t)
        self.t_rank = t - 1
        self._compiled_args = self._pack_compiled_args()

    _OFFSET_ORDER = ("alpha", "gamma", "psi", "U", "V", "beta", "log_phi_nb", "log_tau_u",
                     "log_tau_v", "ar_a", "ar_b", "log_sigma", "log_lam_u_fuse",
                     "log_lam_u_sparse", "log_lam_v_fuse", "log_lam_v_sparse",
                     "log_phi_local", "log_delta")

    def _pack_compiled_args(self):
        spec = self.spec
        n, t = self.shape
        sl = self.layout.slices
        off = np.array([sl[b][0].start if b in sl else -1 for b in self._OFFSET_ORDER],
                       dtype=np.int64)
        obs_i, obs_t = np.divmod(self.obs_idx, t)
        s_edges = (self.s_adj.edge_array if self.s_adj is not None
                   else np.zeros((0, 2), dtype=int)).astype(np.int64)
        hyper = np.array([spec.soft_sd, spec.gamma_shape, spec.gamma_rate, spec.nu, spec.a1,
                          spec.a2, -1.0 if spec.beta_sd is None else spec.beta_sd])
        X = np.ascontiguousarray(self.X, dtype=float).reshape(n, t, -1)
        return (_kernels.FAMILY_CODES[spec.family], n, t, spec.K, X.shape[2], off,
                obs_i.astype(np.int64), obs_t.astype(np.int64), self.y_obs.copy(),
                gammaln(self.y_obs + 1.0), np.ascontiguousarray(self.log_theta), X,
                s_edges, self.s_rank, self.t_adj.edge_array.astype(np.int64), self.t_rank, hyper)

    @property
    def dim(self) -> int:
        return self.layout.size

    def linear_predictor(self, s: ParameterState) -> np.ndarray:
        eta = (s["alpha"] + s["gamma"][:, None] + s["psi"][None, :]
               + s["U"].T @ s["V"] + self.log_theta)
        if self.has_cov:
            eta = eta + self.X @ s["beta"]
        return eta

    def logp_grad(self, x: np.ndarray):
        """Compiled log posterior and gradient (the sampler's hot path)."""
        return _kernels.logp_grad(np.asarray(x, dtype=float), *self._compiled_args)

    # Sampler coordinates: non-centred where the prior creates a funnel
    # (innovations for AR-type rows, scale-free fused-Laplace factors).
    def sampler_logp_grad(self, z: np.ndarray):
        """Log density and gradient in sampler coordinates, Jacobian included."""
        return _kernels.logp_grad_sampler(np.asarray(z, dtype=float), *self._compiled_args)

    def to_model(self, z: np.ndarray) -> np.ndarray:
        """Map one sampler-coordinate vector (or a stack of them) to the packed model vector."""
        z = np.asarray(z, dtype=float)
        fam, n, t, k = self._compiled_args[:4]
        off = self._compiled_args[5]
        if z.ndim == 1:
            return _kernels.to_model(z, fam, n, t, k, off)
        flat = z.reshape(-1, z.shape[-1])
        return np.stack([_kernels.to_model(r, fam, n, t, k, off) for r in flat]).reshape(z.shape)

    def from_model(self, x: np.ndarray) -> np.ndarray:
        fam, n, t, k = self._compiled_args[:4]
        return _kernels.from_model(np.asarray(x, dtype=float), fam, n, t, k, self._compiled_args[5])

    def logp_grad_reference(self, x: np.ndarray):
        """Same as :meth:`logp_grad`, evaluated term by term with numpy."""
        lp, g, _ = self._evaluate(x, terms=False)
        return lp, g

    def logp(self, x: np.ndarray) -> float:
        return self._evaluate(x, terms=False)[0]

    def terms(self, x: np.ndarray) -> dict:
        return self._evaluate(x, terms=True)[2]

    def _evaluate(self, x, terms):
        spec = self.spec
        L = self.layout
        s = L.unpack(x)
        grad = np.zeros_like(x)
        gs = L.unpack(grad)  # views into grad
        parts = {}
        U, V = s["U"], s["V"]
        n, t = self.shape

        # likelihood
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            eta = self.linear_predictor(s).ravel()
            log_phi = float(s["log_phi_nb"])
            ll, d_eta_obs, d_lphi = dist._negbin(self.y_obs, eta[self.obs_idx], log_phi)
        parts["likelihood"] = float(ll.sum())
        g_eta = np.zeros(n * t)
        g_eta[self.obs_idx] = d_eta_obs
        g_eta = g_eta.reshape(n, t)
        gs["alpha"][...] = g_eta.sum()
        gs["gamma"][:] = g_eta.sum(axis=1)
        gs["psi"][:] = g_eta.sum(axis=0)
        gs["U"][:] = V @ g_eta.T
        gs["V"][:] = U @ g_eta
        if self.has_cov:
            gs["beta"][:] = np.einsum("itp,it->p", self.X, g_eta)
        # N(0, 1) on log dispersion
        parts["dispersion"] = -0.5 * log_phi ** 2 - 0.5 * dist.LOG_2PI
        gs["log_phi_nb"][...] = float(d_lphi.sum()) - log_phi

        if spec.beta_sd is not None and self.has_cov:
            lp_b, d_b, _, _ = dist.normal_logpdf(s["beta"], 0.0, spec.beta_sd)
            parts["beta"] = float(lp_b.sum())
            gs["beta"][:] += d_b

        # soft sum-to-zero on intercept deviations (alpha carries the level)
        lp_fe = 0.0
        for name in ("gamma", "psi"):
            lp_fe += self._soft_mean(s[name][None, :], gs[name][None, :], spec.soft_sd)
        parts["intercept_means"] = lp_fe

        fam = spec.family
        if fam in ("vanilla", "space"):
            lp_v = -0.5 * float(np.sum(V * V)) - 0.5 * V.size * dist.LOG_2PI
            gs["V"][:] -= V
            parts["V"] = lp_v
        if fam == "vanilla":
            parts["U"] = -0.5 * float(np.sum(U * U)) - 0.5 * U.size * dist.LOG_2PI
            gs["U"][:] -= U
        if fam in ("space", "space_time_icar", "space_time_ar", "space_time_shrinkage"):
            parts["U"] = self._icar_block(U, gs["U"], s, gs, "log_tau_u", self.s_adj, self.s_rank)
        if fam == "space_time_icar":
            parts["V"] = self._icar_block(V, gs["V"], s, gs, "log_tau_v", self.t_adj, self.t_rank)
        if fam == "space_time_ar":
            log_sigma = float(s["log_sigma"])
            lp, d_v, d_a, d_b, d_ls = dist.ar1_log_density(V, float(s["ar_a"]), float(s["ar_b"]),
                                                           np.exp(log_sigma))
            gs["V"][:] += d_v
            gs["ar_a"][...] = d_a
            gs["ar_b"][...] = d_b
            # flat prior on sigma: Jacobian of the log transform
            gs["log_sigma"][...] = d_ls + 1.0
            parts["V"] = lp + log_sigma
        if fam == "space_time_lasso":
            parts["U"] = self._lasso_block(U, gs["U"], s, gs, "u", self.s_adj)
            parts["V"] = self._lasso_block(V, gs["V"], s, gs, "v", self.t_adj)
        if fam == "space_time_shrinkage":
            lphi, ldelta = s["log_phi_local"], s["log_delta"]
            state = dist.ShrinkageState(np.exp(lphi), np.exp(ldelta), spec.nu, spec.a1, spec.a2)
            lp, d_v, d_a, d_b, d_lphi, d_ldelta = dist.shrinkage_ar1_log_density(
                V, float(s["ar_a"]), float(s["ar_b"]), state)
            gs["V"][:] += d_v
            gs["ar_a"][...] = d_a
            gs["ar_b"][...] = d_b
            gs["log_phi_local"][:] = d_lphi + 1.0
            gs["log_delta"][:] = d_ldelta + 1.0
            parts["V"] = lp + float(lphi.sum() + ldelta.sum())
        if fam != "vanilla":
            parts["factor_means"] = (self._soft_mean(U, gs["U"], spec.soft_sd)
                                     + self._soft_mean(V, gs["V"], spec.soft_sd))

        lp = float(sum(parts.values()))
        if not np.isfinite(lp):
            lp = -np.inf
        return lp, grad, (parts if terms else None)

    @staticmethod
    def _soft_mean(rows, grad_rows, sd):
        m = rows.mean(axis=1)
        grad_rows -= (m / (sd * sd))[:, None] / rows.shape[1]
        return float(np.sum(-0.5 * (m / sd) ** 2 - np.log(sd) - 0.5 * dist.LOG_2PI))

    def _gamma_prior(self, log_x, name, gs):
        x = np.exp(log_x)
        lp, _, dl = dist.gamma_logpdf(x, self.spec.gamma_shape, self.spec.gamma_rate)
        gs[name][...] += dl + 1.0
        return float(lp) + log_x

    def _icar_block(self, rows, grad_rows, s, gs, name, adj, rank):
        log_tau = float(s[name])
        lp, d_rows, d_lt = dist.icar_log_density(rows, adj, np.exp(log_tau), rank)
        grad_rows += d_rows
        gs[name][...] = d_lt
        return lp + self._gamma_prior(log_tau, name, gs)

    def _lasso_block(self, rows, grad_rows, s, gs, which, adj):
        nf, ns = f"log_lam_{which}_fuse", f"log_lam_{which}_sparse"
        lf, ls = float(s[nf]), float(s[ns])
        lp, d_rows, d_lf, d_ls = dist.fused_laplace_log_density(rows, adj, np.exp(lf), np.exp(ls))
        grad_rows += d_rows
        gs[nf][...] = d_lf
        gs[ns][...] = d_ls
        return lp + self._gamma_prior(lf, nf, gs) + self._gamma_prior(ls, ns, gs)


def mean_log_rate(state: ParameterState, panel: MaskedPanel, i: int, t: int) -> float:
    """Linear predictor of cell (i, t), offset included."""
    val = (state["alpha"] + state["gamma"][i] + state["psi"][t]
           + state["U"][:, i] @ state["V"][:, t] + np.log(panel.populations[i, t]))
    if panel.n_covariates:
        val = val + panel.covariates[i, t] @ state["beta"]
    return float(val)


def log_posterior(state: ParameterState, panel: MaskedPanel, spec: ModelSpec) -> float:
    post = Posterior(spec, panel)
    parts = post.terms(post.layout.pack(state))
    for name, value in parts.items():
        if not np.isfinite(value):
            raise ModelError(f"non-finite log posterior term {name!r}: {value}")
    return float(sum(parts.values()))


def grad_log_posterior(state: ParameterState, panel: MaskedPanel, spec: ModelSpec) -> np.ndarray:
    post = Posterior(spec, panel)
    _, g = post.logp_grad(post.layout.pack(state))
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise ModelError(f"non-finite gradient component {post.layout.owner(int(bad[0]))}")
    return g


def _prior_median(shape, rate):
    return float(stats.gamma.ppf(0.5, shape, scale=1.0 / rate))


def init_state(spec: ModelSpec, panel: MaskedPanel, rng: np.random.Generator) -> ParameterState:
    """Starting point for one chain.

    ``alpha`` matches the observed crude rate; intercept deviations and
    ``beta`` start at zero; factor entries are ``N(0, 0.1**2)``; positive
    scalars start at their prior medians (sigma at 1) with a small jitter
    on the log scale.
    """
    obs = panel.observed
    if not obs.any():
        raise ModelError("panel has no observed cells")
    n, t, p = panel.n_units, panel.n_times, panel.n_covariates
    total = float(panel.counts[obs].sum())
    rate = max(total, 0.5) / float(panel.populations[obs].sum())
    layout = Layout.for_spec(spec, n, t, p)
    s = {name: np.zeros(shape) for name, shape in layout.blocks}
    s["alpha"] = np.asarray(np.log(rate))
    s["U"] = 0.1 * rng.standard_normal((spec.K, n))
    s["V"] = 0.1 * rng.standard_normal((spec.K, t))
    tau_med = np.log(_prior_median(spec.gamma_shape, spec.gamma_rate))

    def jitter(size=None):
        return 0.1 * rng.standard_normal(size)

    for name in layout.names:
        if name.startswith("log_tau") or name.startswith("log_lam"):
            s[name] = np.asarray(tau_med + jitter())
    if "log_sigma" in s:
        s["log_sigma"] = np.asarray(jitter())
    s["log_phi_nb"] = np.asarray(jitter())
    if spec.family == "space_time_shrinkage":
        phi_med = _prior_median(spec.nu / 2.0, spec.nu / 2.0)
        s["log_phi_local"] = np.log(phi_med) + jitter((spec.K, t))
        meds = [_prior_median(spec.a1, 1.0)] + [_prior_median(spec.a2, 1.0)] * (spec.K - 1)
        s["log_delta"] = np.log(meds) + jitter(spec.K)
    return s
