"""Command-line front end: ``stmc {simulate,fit,att,benchmark,scree,smooth}``.

Configuration files are flat ``key = value`` text (``#`` starts a comment);
command-line flags override file values. Every output file starts with a
``#`` comment naming the invocation and seed so results are traceable.
"""

from __future__ import annotations

import argparse
import csv
import logging
import shlex
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .counterfactual import AttError, att_svg, estimate_att, write_att_csv
from .graphs import fixture_adjacency, fixture_unit_ids, read_edge_list
from .model import ModelError, ModelSpec
from .panel import PanelError, load_panel, mask_treated, write_panel
from .plotting import bar_svg
from .preprocess import scree, scree_matrix, smooth_panel
from .sampler import (SamplerConfig, SamplerError, posterior_predictive, read_predictive_csv,
                      run_chains, summarize, write_params_csv, write_predictive_csv)
from .simulate import BenchmarkConfig, SimConfig, benchmark, generate, read_population_grid

log = logging.getLogger("stmc")


class UsageError(Exception):
    pass


# config files ----------------------------------------------------------------------

def read_config(path) -> dict:
    """Parse ``key = value`` lines; errors carry the line number."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip().lower()
            if not sep or not key:
                raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            if key in out:
                raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def _require(cfg: dict, keys, source, display=None) -> None:
    display = display or {}
    missing = [display.get(k, k) for k in keys if k not in cfg]
    if missing:
        raise UsageError(f"{source}: missing required key(s): {', '.join(missing)}")


def _as(cfg, key, kind, source):
    try:
        if kind is bool:
            v = cfg[key].lower()
            if v not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(v)
            return v in ("1", "true", "yes")
        return kind(cfg[key])
    except ValueError:
        raise UsageError(f"{source}: key {key!r} has invalid value {cfg[key]!r}") from None


def _list(cfg, key, kind, source):
    return tuple(_as({key: v.strip()}, key, kind, source) for v in cfg[key].split(",") if v.strip())


def _header(argv, seed=None) -> str:
    line = "# stmc " + " ".join(shlex.quote(a) for a in argv)
    if seed is not None:
        line += f"  [seed={seed}]"
    return f"{line}\n# stmc version {__version__}\n"


def _write_kv(path, values: dict, header: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header)
        for k, v in values.items():
            fh.write(f"{k} = {v}\n")


def _resolve_adjacency(value, base_dir, unit_ids):
    if value in (None, ""):
        return None
    if value == "bundled":
        return fixture_adjacency()
    path = Path(value)
    if not path.is_absolute():
        path = Path(base_dir) / path
    return read_edge_list(path, unit_ids)


# commands ----------------------------------------------------------------------------

SIM_KEYS = {"N": int, "T": int, "K_true": int, "n_treated": int, "t_start": int,
            "rho_S": float, "rho_T": float, "tau2": float, "alpha": float,
            "fe_variance": float, "replicate_seed": int, "start_year": int}
SIM_PATHS = ("adjacency", "populations")


def cmd_simulate(args, argv) -> int:
    cfg = read_config(args.config)
    if args.seed is not None:
        cfg["replicate_seed"] = str(args.seed)
    fields = {k.lower(): k for k in SIM_KEYS}
    _require(cfg, list(fields), args.config, fields)
    unknown = set(cfg) - set(fields) - set(SIM_PATHS)
    if unknown:
        raise UsageError(f"{args.config}: unknown key(s): {', '.join(sorted(unknown))}")
    kw = {name: _as(cfg, key, SIM_KEYS[name], args.config) for key, name in fields.items()}
    base = Path(args.config).parent
    if cfg.get("populations"):
        kw["populations"] = read_population_grid(base / cfg["populations"])
    if cfg.get("adjacency"):
        kw["adjacency"] = _resolve_adjacency(cfg["adjacency"], base,
                                             fixture_unit_ids(kw["N"]))
    sim = SimConfig(**kw)
    panel, truth = generate(sim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _header(argv, sim.replicate_seed)
    write_panel(panel, out / "panel.csv", header)
    with open(out / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "time", "y0", "lambda"])
        for i, u in enumerate(panel.unit_ids):
            for t, lab in enumerate(panel.time_labels):
                w.writerow([u, lab, f"{truth.y0[i, t]:.0f}", repr(float(truth.lam[i, t]))])
    echo = sim.echo()
    echo.update({k: cfg[k] for k in SIM_PATHS if cfg.get(k)})
    _write_kv(out / "sim_config.txt", echo, header)
    print(f"wrote {panel.n_units * panel.n_times} cells to {out}")
    return 0


MODEL_KEYS = ("family", "k", "nu", "a1", "a2", "soft_sd", "gamma_shape", "gamma_rate")
SAMPLER_KEYS = {"iterations": int, "warmup": int, "chains": int, "target_accept": float,
                "max_tree_depth": int, "seed": int, "guard_threshold": float}


def cmd_fit(args, argv) -> int:
    cfg = read_config(args.model)
    _require(cfg, ("family", "k"), args.model)
    unknown = set(cfg) - set(MODEL_KEYS) - set(SAMPLER_KEYS) - {"adjacency"}
    if unknown:
        raise UsageError(f"{args.model}: unknown key(s): {', '.join(sorted(unknown))}")
    for key in SAMPLER_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = str(flag)
    if args.adjacency is not None:
        cfg["adjacency"] = args.adjacency
    panel = load_panel(args.panel)
    base = Path(args.model).parent if args.adjacency is None else Path.cwd()
    adj = _resolve_adjacency(cfg.get("adjacency"), base, panel.unit_ids)
    try:
        spec = ModelSpec.from_config(cfg, spatial_adjacency=adj)
    except ModelError as exc:
        raise UsageError(str(exc)) from None
    scfg = SamplerConfig(**{k: _as(cfg, k, kind, args.model)
                            for k, kind in SAMPLER_KEYS.items() if k in cfg})
    masked = mask_treated(panel)
    draws = run_chains(spec, masked, scfg)
    posterior_predictive(draws, spec, masked, seed=scfg.seed)
    diag = summarize(draws)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _header(argv, scfg.seed)
    write_params_csv(draws, out / "params.csv", header)
    write_predictive_csv(draws, panel, out / "predictive.csv", header)
    with open(out / "param_diagnostics.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "rhat", "ess_bulk"])
        for name, r, e in zip(draws.names, diag["param_rhat"], diag["param_ess"]):
            w.writerow([name, f"{r:.5g}", f"{e:.5g}"])
    report = {
        "family": spec.family, "k": spec.K, "chains": scfg.chains,
        "iterations": scfg.iterations, "warmup": scfg.warmup, "seed": scfg.seed,
        "rhat_method": "rank-normalized split" + (" (halves of one chain)" if scfg.chains == 1 else ""),
        "mean_predictive_rhat": f"{diag.get('mean_predictive_rhat', float('nan')):.5g}",
        "max_param_rhat": f"{np.nanmax(diag['param_rhat']):.5g}",
        "divergences_per_chain": ",".join(map(str, diag["divergences"])),
        "guard_fraction": f"{diag.get('guard_fraction', 0.0):.5g}",
        "flagged_constant": ",".join(diag["flagged"]) or "none",
        "step_size_per_chain": ",".join(f"{s:.4g}" for s in draws.step_size),
        "mean_tree_depth": f"{draws.tree_depth.mean():.3g}",
    }
    _write_kv(out / "diagnostics.txt", report, header)
    print(f"{spec.family} K={spec.K}: mean predictive R-hat {report['mean_predictive_rhat']}, "
          f"divergences {report['divergences_per_chain']}, guard fraction {report['guard_fraction']}")
    return 0


def cmd_att(args, argv) -> int:
    pred_path = Path(args.fit_dir) / "predictive.csv"
    if not pred_path.exists():
        raise UsageError(f"no predictive draws at {pred_path}; run 'stmc fit' first")
    panel = load_panel(args.panel)
    predictive, cells = read_predictive_csv(pred_path, panel)
    result = estimate_att(panel, predictive, cells, args.rate_denominator)
    if args.no_groups:
        result.per_group.clear()
        result.per_group_summary.clear()
    out = Path(args.out) if args.out else Path(args.fit_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = _header(argv)
    write_att_csv(result, out / "att.csv", header)
    start = min(panel.time_labels[t] for t in np.nonzero(panel.treated)[1])
    svg = att_svg(result.times, result.per_time_summary, treatment_start=start,
                  ylabel=f"ATT per {args.rate_denominator:g} person-years")
    (out / "att.svg").write_text(svg, encoding="utf-8")
    s = result.overall_summary
    print(f"overall ATT {s.mean:.4g} (95% CI {s.lo:.4g}, {s.hi:.4g}); "
          f"dropped_fraction {result.dropped_fraction:.4g}")
    if result.unstable:
        print("warning: more than 10% of draws hit the numerical guard; results may be unreliable",
              file=sys.stderr)
    return 0


BENCH_KEYS = {"alphas": float, "tau2s": float, "smoothed": bool, "methods": str}
BENCH_SCALARS = {"replicates": int, "seed": int, "iterations": int, "warmup": int, "chains": int,
                 "smooth_df": int, "rate_denominator": float, "cv_folds": int}


def cmd_benchmark(args, argv) -> int:
    cfg = read_config(args.config)
    if args.replicates is not None:
        cfg["replicates"] = str(args.replicates)
    if args.methods is not None:
        cfg["methods"] = args.methods
    _require(cfg, ("alphas", "methods", "replicates"), args.config)
    unknown = set(cfg) - set(BENCH_KEYS) - set(BENCH_SCALARS)
    if unknown:
        raise UsageError(f"{args.config}: unknown key(s): {', '.join(sorted(unknown))}")
    kw = {k: _list(cfg, k, kind, args.config) for k, kind in BENCH_KEYS.items() if k in cfg}
    kw.update({k: _as(cfg, k, kind, args.config) for k, kind in BENCH_SCALARS.items() if k in cfg})
    bcfg = BenchmarkConfig(**kw)
    try:
        bcfg.method_specs()
    except (ValueError, ModelError) as exc:
        raise UsageError(str(exc)) from None
    rows = benchmark(bcfg, args.out, workers=args.workers, header=_header(argv, bcfg.seed))
    failed = sum(1 for r in rows if r["error"])
    print(f"{len(rows)} replicate rows in {args.out} ({failed} failed)")
    return 0


def cmd_scree(args, argv) -> int:
    panel = load_panel(args.panel)
    fractions = scree(scree_matrix(panel))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = _header(argv)
    with open(out / "scree.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "variance_fraction"])
        for j, f in enumerate(fractions, start=1):
            w.writerow([j, f"{f:.10g}"])
    svg = bar_svg(fractions, title="Variance explained by principal component",
                  ylabel="fraction of variance")
    (out / "scree.svg").write_text(svg, encoding="utf-8")
    print(" ".join(f"{f:.3f}" for f in fractions[:5]))
    return 0


def cmd_smooth(args, argv) -> int:
    panel = load_panel(args.panel)
    smoothed = smooth_panel(panel, df=args.df)
    write_panel(smoothed, args.out, _header(argv))
    print(f"smoothed {panel.n_units} series with df={args.df}")
    return 0


# entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stmc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"stmc {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic panel with known counterfactuals")
    s.add_argument("--config", required=True, help="simulation config (key = value)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override replicate_seed")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a Bayesian matrix-completion model")
    f.add_argument("panel", help="panel CSV")
    f.add_argument("--model", required=True, help="model config (family, k, sampler keys)")
    f.add_argument("--out", required=True, help="output directory for draws and diagnostics")
    f.add_argument("--adjacency", help="edge-list CSV, or 'bundled' for the 29-unit fixture")
    f.add_argument("--iterations", type=int)
    f.add_argument("--warmup", type=int)
    f.add_argument("--chains", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--target-accept", dest="target_accept", type=float)
    f.set_defaults(func=cmd_fit)

    a = sub.add_parser("att", help="ATT summaries and plot from a fit directory")
    a.add_argument("fit_dir")
    a.add_argument("--panel", required=True, help="the panel CSV that was fitted")
    a.add_argument("--out", help="output directory (default: the fit directory)")
    a.add_argument("--rate-denominator", dest="rate_denominator", type=float, default=1e5)
    a.add_argument("--no-groups", dest="no_groups", action="store_true",
                   help="omit per-group rows")
    a.set_defaults(func=cmd_att)

    b = sub.add_parser("benchmark", help="simulation study of counterfactual bias")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--replicates", type=int)
    b.add_argument("--methods", help="comma-separated, e.g. space_time_ar:3,als:3,oracle")
    b.add_argument("--workers", type=int, help="worker processes (default: $STMC_WORKERS or 1)")
    b.set_defaults(func=cmd_benchmark)

    c = sub.add_parser("scree", help="variance explained per principal component")
    c.add_argument("panel")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_scree)

    m = sub.add_parser("smooth", help="spline-smooth each unit's series (Poisson GLM)")
    m.add_argument("panel")
    m.add_argument("--out", required=True, help="output panel CSV")
    m.add_argument("--df", type=int, default=5)
    m.set_defaults(func=cmd_smooth)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (PanelError, ModelError, AttError, SamplerError, ValueError, OSError) as exc:
        print(f"stmc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
