"""Synthetic panels with low-rank spatio-temporal structure and known truth.

Counts follow ``Y_it(0) ~ Poisson(exp(alpha + gamma_i + psi_t + U_i'V_t) * theta_it)``
with rows of ``U`` drawn from a Leroux CAR on the spatial graph and rows of
``V`` from a Leroux CAR on the time path. No treatment effect is injected:
treated cells hold ``Y(0)`` so that imputations can be scored against it.
"""

from __future__ import annotations

import csv
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .graphs import (Adjacency, fixture_adjacency, fixture_unit_ids, knn_lattice_adjacency,
                     leroux_precision, path_adjacency, sample_gmrf, write_edge_list)
from . import baselines
from .baselines import RateMatrix
from .counterfactual import estimate_att
from .model import FAMILIES, ModelSpec, canonical_family
from .panel import PanelData, mask_treated
from .preprocess import smooth_panel
from .sampler import SamplerConfig, posterior_predictive, run_chains, summarize

log = logging.getLogger(__name__)


@dataclass
class SimConfig:
    N: int = 29
    T: int = 15
    K_true: int = 3
    n_treated: int = 6
    t_start: int = 9          # 1-based first treated period
    rho_S: float = 0.99
    rho_T: float = 0.99
    tau2: float = 0.1
    alpha: float = -5.0
    fe_variance: float = 0.000015
    replicate_seed: int = 0
    start_year: int = 1989
    adjacency: Adjacency | None = field(default=None, repr=False)
    populations: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 1 <= self.t_start <= self.T:
            raise ValueError("t_start must lie in 1..T")
        if not 0 <= self.n_treated <= self.N:
            raise ValueError("n_treated must lie in 0..N")
        if not (0 <= self.rho_S < 1 and 0 <= self.rho_T < 1):
            raise ValueError("rho must lie in [0, 1)")
        if self.tau2 <= 0:
            raise ValueError("tau2 must be positive")

    def resolved_adjacency(self) -> Adjacency:
        if self.adjacency is not None:
            return self.adjacency
        if self.N != 29:
            raise ValueError("the bundled adjacency has 29 units; pass one explicitly")
        return fixture_adjacency()

    def resolved_populations(self) -> np.ndarray:
        if self.populations is not None:
            return np.asarray(self.populations, dtype=float)
        pops = fixture_populations()
        if pops.shape != (self.N, self.T):
            raise ValueError("the bundled population grid is 29 x 15; pass one explicitly")
        return pops

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("adjacency")
        d.pop("populations")
        return d


@dataclass
class SimTruth:
    y0: np.ndarray        # full Y(0) grid, including later-masked cells
    lam: np.ndarray       # Poisson means
    U: np.ndarray
    V: np.ndarray
    gamma: np.ndarray
    psi: np.ndarray


def make_population_fixture(n: int = 29, t: int = 15, seed: int = 20240501) -> np.ndarray:
    """Population grid: base sizes log-uniform on [500, 50000], mild linear growth.

    Units are ordered by decreasing base size so that the first ids (the
    treated ones in the simulation) are the most populous, as for the
    metropolitan areas that adopt such policies.
    """
    rng = np.random.default_rng(seed)
    base = np.exp(rng.uniform(np.log(500.0), np.log(50000.0), n))
    growth = rng.uniform(0.0, 0.02, n)
    base = np.sort(base)[::-1]
    years = np.arange(t)
    return np.round(base[:, None] * (1.0 + growth[:, None] * years[None, :]))


def read_population_grid(path) -> np.ndarray:
    """Read a ``unit,1..T`` population grid (``#`` lines are comments)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(ln for ln in fh if not ln.startswith("#")))
    try:
        grid = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric population ({exc})") from None
    if grid.ndim != 2 or grid.size == 0 or np.any(grid <= 0):
        raise ValueError(f"{path}: populations must form a positive unit x time grid")
    return grid


def fixture_populations() -> np.ndarray:
    path = resources.files("stmc") / "data" / "populations_29x15.csv"
    with resources.as_file(path) as p:
        return read_population_grid(p)


def generate(cfg: SimConfig, rng: np.random.Generator | None = None) -> tuple[PanelData, SimTruth]:
    """Draw one synthetic panel and its ground truth.

    The random stream depends only on ``cfg.replicate_seed`` (unless ``rng``
    is given), not on ``alpha``, so regimes that differ only in ``alpha``
    share their latent structure.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.replicate_seed)
    adj = cfg.resolved_adjacency()
    pops = cfg.resolved_populations()
    q_s = leroux_precision(adj, cfg.rho_S)
    q_t = leroux_precision(path_adjacency(cfg.T), cfg.rho_T)
    U = np.stack([sample_gmrf(q_s, cfg.tau2, rng) for _ in range(cfg.K_true)])
    V = np.stack([sample_gmrf(q_t, cfg.tau2, rng) for _ in range(cfg.K_true)])
    sd = np.sqrt(cfg.fe_variance)
    gamma = sd * rng.standard_normal(cfg.N)
    psi = sd * rng.standard_normal(cfg.T)
    lam = np.exp(cfg.alpha + gamma[:, None] + psi[None, :] + U.T @ V) * pops
    y0 = rng.poisson(lam).astype(float)

    treated = np.zeros((cfg.N, cfg.T), dtype=bool)
    treated[: cfg.n_treated, cfg.t_start - 1:] = True
    ids = fixture_unit_ids(cfg.N)
    groups = ["treated" if i < cfg.n_treated else "control" for i in range(cfg.N)]
    panel = PanelData(
        counts=y0,
        populations=pops,
        covariates=None,
        treated=treated,
        unit_ids=ids,
        group_of_unit=groups,
        time_labels=range(cfg.start_year, cfg.start_year + cfg.T),
    )
    return panel, SimTruth(y0=y0, lam=lam, U=U, V=V, gamma=gamma, psi=psi)


def percent_bias(estimates: np.ndarray, truth: SimTruth, mask: np.ndarray) -> float:
    """Mean over masked cells of ``100 |Yhat - Y(0)| / lambda``.

    ``estimates`` is either a full grid or a vector over ``mask`` cells in
    row-major order.
    """
    mask = np.asarray(mask, dtype=bool)
    est = np.asarray(estimates, dtype=float)
    if est.shape == mask.shape:
        est = est[mask]
    return float(np.mean(np.abs(est - truth.y0[mask]) / truth.lam[mask]) * 100.0)


def inject_effect(panel: PanelData, rate_shift: float, rng: np.random.Generator,
                  rate_denominator: float = 1e5) -> PanelData:
    """Add Poisson(rate_shift * theta / rate_denominator) extra cases to treated cells."""
    extra = rng.poisson(np.clip(rate_shift, 0, None) * panel.populations / rate_denominator)
    counts = np.where(panel.treated, panel.counts + extra, panel.counts)
    return panel.with_counts(counts)


def write_fixtures(directory) -> None:
    """Regenerate the bundled adjacency and population files into ``directory``."""
    directory = Path(directory)
    ids = fixture_unit_ids(29)
    adj, _ = knn_lattice_adjacency(29, k=4, seed=0)
    write_edge_list(adj, ids, directory / "adjacency_29.csv")
    pops = make_population_fixture()
    with open(directory / "populations_29x15.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("# synthetic population fixture: make_population_fixture(29, 15, seed=20240501)\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit"] + [str(t) for t in range(1, pops.shape[1] + 1)])
        for uid, row in zip(ids, pops):
            w.writerow([uid] + [f"{v:.0f}" for v in row])


# benchmark ------------------------------------------------------------------------

BAYES_METHODS = FAMILIES
BASELINE_METHODS = ("als", "soft_impute", "svt", "nuclear_fe")
REFERENCE_METHODS = ("oracle", "zero")

REPLICATE_COLUMNS = ["method", "family", "K", "alpha", "tau2", "smoothed", "replicate", "bias_pct",
                     "att_mean", "att_lo", "att_hi", "mean_rhat", "divergences",
                     "dropped_fraction", "error"]


@dataclass(frozen=True)
class MethodSpec:
    name: str
    K: int = 0

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        """``"space_time_ar:3"``, ``"als:7"``, ``"soft_impute"`` ..."""
        name, _, k = text.strip().partition(":")
        name = name.strip()
        if name not in BAYES_METHODS + BASELINE_METHODS + REFERENCE_METHODS:
            name = canonical_family(name)
        if (name in BAYES_METHODS or name == "als") and not k:
            raise ValueError(f"method {name!r} needs a rank, e.g. {name}:3")
        if k and int(k) < 1:
            raise ValueError(f"method {name!r}: rank must be at least 1, got {k}")
        return cls(name, int(k) if k else 0)

    @property
    def family(self) -> str:
        return self.name if self.name in BAYES_METHODS else ""

    @property
    def label(self) -> str:
        return f"{self.name}:{self.K}" if self.K else self.name


@dataclass
class BenchmarkConfig:
    alphas: tuple = (-5.0, -7.0)
    tau2s: tuple = (0.1,)
    smoothed: tuple = (False,)
    methods: tuple = ("vanilla:3",)
    replicates: int = 20
    seed: int = 2024
    iterations: int = 1000
    warmup: int = 500
    chains: int = 2
    smooth_df: int = 5
    rate_denominator: float = 1e5
    cv_folds: int = 10

    def method_specs(self) -> list:
        return [MethodSpec.parse(m) if isinstance(m, str) else m for m in self.methods]


def replicate_seed(master: int, replicate: int) -> int:
    """Dataset seed shared by every method and regime of one replicate."""
    return int(np.random.SeedSequence([master, replicate]).generate_state(1)[0])


def job_seed(master: int, replicate: int, label: str) -> int:
    return int(np.random.SeedSequence([master, replicate, zlib.crc32(label.encode())])
               .generate_state(1)[0])


def _baseline_estimate(name, K, panel, denominator, folds, seed):
    m = RateMatrix.from_panel(panel, denominator=denominator)
    rng = np.random.default_rng(seed)
    if name == "als":
        rates = baselines.als_complete(m, K).matrix
    else:
        top = np.linalg.norm(np.where(m.observed, m.values, 0.0), 2)
        grid = [top * f for f in (0.3, 0.1, 0.05, 0.02, 0.01, 0.005)]
        if name == "soft_impute":
            method = lambda mm, lam: baselines.soft_impute(mm, lam, debias=True)
        elif name == "svt":
            method = lambda mm, thr: baselines.svt(mm, thr, tol=1e-4, iters=1000)
        else:
            method = lambda mm, lam: baselines.nuclear_fe(mm, lam)
        best = baselines.cv_tune(method, m, grid, folds=folds, rng=rng)
        rates = method(m, best).matrix
    return rates * panel.populations / denominator


def _bayes_fit(spec, panel, cfg: SamplerConfig):
    mp = mask_treated(panel)
    draws = run_chains(spec, mp, cfg)
    posterior_predictive(draws, spec, mp, seed=cfg.seed)
    return mp, draws


def run_job(bcfg: BenchmarkConfig, method: MethodSpec, alpha: float, tau2: float, smoothed: bool,
            replicate: int) -> dict:
    """Simulate one replicate, fit one method, score it. Never raises."""
    row = {"method": method.name, "family": method.family, "K": method.K, "alpha": alpha,
           "tau2": tau2, "smoothed": int(smoothed), "replicate": replicate}
    for col in REPLICATE_COLUMNS[7:]:
        row[col] = ""
    try:
        panel, truth = generate(SimConfig(alpha=alpha, tau2=tau2,
                                          replicate_seed=replicate_seed(bcfg.seed, replicate)))
        fit_panel = smooth_panel(panel, bcfg.smooth_df) if smoothed else panel
        mask = panel.treated
        seed = job_seed(bcfg.seed, replicate, method.label)
        if method.name == "oracle":
            est = truth.lam[mask]
        elif method.name == "zero":
            est = np.zeros(int(mask.sum()))
        elif method.name in BASELINE_METHODS:
            est = _baseline_estimate(method.name, method.K, fit_panel, bcfg.rate_denominator,
                                     bcfg.cv_folds, seed)[mask]
        else:
            spec = ModelSpec(method.name, method.K, spatial_adjacency=fixture_adjacency())
            cfg = SamplerConfig(iterations=bcfg.iterations, warmup=bcfg.warmup,
                                chains=bcfg.chains, seed=seed)
            _, draws = _bayes_fit(spec, fit_panel, cfg)
            rows = draws.predictive.reshape(-1, draws.predictive.shape[2])
            rows = rows[~draws.guard_fired.ravel()]
            est = rows.mean(axis=0) if len(rows) else np.full(int(mask.sum()), np.nan)
            # ATT against the observed outcomes of the (unsmoothed) panel
            att = estimate_att(panel, draws.predictive, draws.cells, bcfg.rate_denominator)
            diag = summarize(draws)
            row.update(att_mean=f"{att.overall_summary.mean:.6g}",
                       att_lo=f"{att.overall_summary.lo:.6g}",
                       att_hi=f"{att.overall_summary.hi:.6g}",
                       mean_rhat=f"{diag['mean_predictive_rhat']:.6g}",
                       divergences=int(draws.divergences.sum()),
                       dropped_fraction=f"{att.dropped_fraction:.6g}")
        row["bias_pct"] = f"{percent_bias(est, truth, mask):.6g}"
    except Exception as exc:  # recorded per job; the sweep continues
        log.warning("job %s alpha=%s rep=%s failed: %s", method.label, alpha, replicate, exc)
        row["bias_pct"] = "nan"
        row["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
    return row


def _job_key(row) -> tuple:
    return (str(row["method"]), int(row["K"]), float(row["alpha"]), float(row["tau2"]),
            int(row["smoothed"]), int(row["replicate"]))


def read_replicates(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))


def _write_rows(path, rows, header):
    rows = sorted(rows, key=_job_key)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        fh.write(header)
        w = csv.DictWriter(fh, REPLICATE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    tmp.replace(path)


def benchmark(bcfg: BenchmarkConfig, out_dir, workers: int | None = None, header: str = "",
              max_jobs: int | None = None) -> list:
    """Run (or resume) the simulate-fit-score sweep.

    Replicate-level rows go to ``replicates.csv`` in ``out_dir`` (rewritten
    after every finished job, so an interrupted sweep resumes where it
    stopped); the aggregate goes to ``bias_table.csv``. ``workers``
    defaults to the ``STMC_WORKERS`` environment variable, else 1.
    ``max_jobs`` caps how many new jobs run in this call. Returns the
    persisted rows as read back from ``replicates.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep_path = out / "replicates.csv"
    done = {_job_key(r): r for r in read_replicates(rep_path)}
    jobs = []
    for rep in range(bcfg.replicates):
        for alpha in bcfg.alphas:
            for tau2 in bcfg.tau2s:
                for sm in bcfg.smoothed:
                    for m in bcfg.method_specs():
                        key = (m.name, m.K, float(alpha), float(tau2), int(sm), rep)
                        if key not in done:
                            jobs.append((m, float(alpha), float(tau2), bool(sm), rep))
    if max_jobs is not None:
        jobs = jobs[:max_jobs]
    if workers is None:
        workers = int(os.environ.get("STMC_WORKERS", "1"))
    log.info("benchmark: %d jobs to run, %d already done", len(jobs), len(done))
    if workers <= 1:
        for j in jobs:
            row = run_job(bcfg, *j)
            done[_job_key(row)] = row
            _write_rows(rep_path, done.values(), header)
            log.info("finished %s alpha=%s replicate %d: bias %s",
                     j[0].label, j[1], j[4], row["bias_pct"])
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_job, bcfg, *j) for j in jobs]
            for fut in as_completed(futures):
                row = fut.result()
                done[_job_key(row)] = row
                _write_rows(rep_path, done.values(), header)
    _write_rows(rep_path, done.values(), header)
    # re-read so fresh and resumed sweeps return identical string-valued rows
    rows = read_replicates(rep_path)
    write_bias_table(aggregate(rows), out / "bias_table.csv", header)
    return rows


def aggregate(rows) -> dict:
    """``{(method, family, K): {(alpha, tau2, smoothed): (mean, q25, q75, n)}}``.

    Failed jobs (``bias_pct`` nan) are excluded from the statistics.
    """
    groups = {}
    for r in rows:
        key = (r["method"], r["family"], int(r["K"]))
        cell = (float(r["alpha"]), float(r["tau2"]), int(r["smoothed"]))
        groups.setdefault(key, {}).setdefault(cell, []).append(float(r["bias_pct"]))
    out = {}
    for key, cells in groups.items():
        out[key] = {}
        for cell, vals in cells.items():
            v = np.array(vals)
            v = v[np.isfinite(v)]
            if v.size:
                q25, q75 = np.quantile(v, [0.25, 0.75])
                out[key][cell] = (float(v.mean()), float(q25), float(q75), int(v.size))
            else:
                out[key][cell] = (float("nan"),) * 3 + (0,)
    return out


def write_bias_table(table: dict, path, header: str = "") -> None:
    """Wide table: one row per method and rank, mean/q25/q75 per grid cell."""
    cells = sorted({c for v in table.values() for c in v})
    names = [f"a{a:g}_t{t:g}_{'smooth' if s else 'raw'}" for a, t, s in cells]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "family", "K"] + [f"{n}_{s}" for n in names
                                                for s in ("mean", "q25", "q75", "n")])
        for key in sorted(table):
            vals = []
            for c in cells:
                m, q1, q3, n = table[key].get(c, (float("nan"),) * 3 + (0,))
                vals += [f"{m:.4g}", f"{q1:.4g}", f"{q3:.4g}", n]
            w.writerow(list(key) + vals)
