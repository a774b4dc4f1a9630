import csv

import numpy as np
import pytest

from stmc.graphs import fixture_adjacency, read_edge_list, fixture_unit_ids
from stmc.simulate import (BenchmarkConfig, MethodSpec, SimConfig, aggregate, benchmark,
                           fixture_populations, generate, inject_effect, job_seed,
                           make_population_fixture, percent_bias, read_population_grid,
                           read_replicates, replicate_seed, write_fixtures)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(t_start=16)
    with pytest.raises(ValueError):
        SimConfig(n_treated=30)
    with pytest.raises(ValueError):
        SimConfig(rho_S=1.0)
    with pytest.raises(ValueError):
        SimConfig(tau2=0.0)
    with pytest.raises(ValueError, match="29 units"):
        generate(SimConfig(N=10))


def test_fixtures_match_regeneration(tmp_path):
    write_fixtures(tmp_path)
    ids = fixture_unit_ids(29)
    assert read_edge_list(tmp_path / "adjacency_29.csv", ids) == fixture_adjacency()
    assert np.array_equal(read_population_grid(tmp_path / "populations_29x15.csv"),
                          fixture_populations())
    pops = make_population_fixture()
    assert pops.shape == (29, 15)
    assert 500 <= pops[:, 0].min() and pops[:, 0].max() <= 50_000
    assert np.all(np.diff(pops[:, 0]) <= 0)


def test_population_grid_errors(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("unit,1,2\nA,10,0\n")
    with pytest.raises(ValueError, match="positive"):
        read_population_grid(p)
    p.write_text("unit,1,2\nA,10,x\n")
    with pytest.raises(ValueError, match="non-numeric"):
        read_population_grid(p)


def test_shapes_and_treatment():
    panel, truth = generate(SimConfig(replicate_seed=3))
    assert (panel.n_units, panel.n_times) == (29, 15)
    assert panel.treated.sum() == 6 * 7
    assert panel.treated[:6, 8:].all() and not panel.treated[6:].any()
    assert panel.time_labels[0] == 1989
    assert np.array_equal(panel.counts, truth.y0)
    assert np.all(truth.lam > 0) and np.all(truth.y0 == np.round(truth.y0))
    assert truth.U.shape == (3, 29) and truth.V.shape == (3, 15)


def test_degenerate_limit():
    cfg = SimConfig(tau2=1e-300, fe_variance=0.0, alpha=-5.0)
    _, truth = generate(cfg)
    assert np.allclose(truth.lam, np.exp(-5.0) * fixture_populations(), rtol=1e-12)


def test_alpha_shift_is_a_constant_factor():
    _, a = generate(SimConfig(alpha=-5.0, replicate_seed=8))
    _, b = generate(SimConfig(alpha=-7.0, replicate_seed=8))
    assert np.allclose(a.lam / b.lam, np.exp(2.0), rtol=1e-12)


def test_determinism():
    p1, t1 = generate(SimConfig(replicate_seed=42))
    p2, t2 = generate(SimConfig(replicate_seed=42))
    assert np.array_equal(p1.counts, p2.counts)
    for name in ("y0", "lam", "U", "V", "gamma", "psi"):
        assert np.array_equal(getattr(t1, name), getattr(t2, name))
    p3, _ = generate(SimConfig(replicate_seed=43))
    assert not np.array_equal(p1.counts, p3.counts)


def test_poisson_moment_over_replicates():
    ys, lams = 0.0, 0.0
    for seed in range(200):
        _, t = generate(SimConfig(replicate_seed=seed))
        ys += t.y0.sum()
        lams += t.lam.sum()
    assert abs(ys / lams - 1.0) < 0.02


def test_temporal_factors_are_autocorrelated():
    acs = []
    for seed in range(30):
        _, t = generate(SimConfig(replicate_seed=seed))
        for v in t.V:
            c = v - v.mean()
            acs.append((c[1:] @ c[:-1]) / (c @ c))
    assert np.mean(acs) > 0.5


def test_percent_bias_examples():
    _, truth = generate(SimConfig(replicate_seed=1))
    mask = np.zeros_like(truth.y0, bool)
    mask[:6, 8:] = True
    assert percent_bias(truth.y0, truth, mask) == 0.0
    assert percent_bias(truth.y0[mask], truth, mask) == 0.0

    class One:
        y0 = np.array([[100.0]])
        lam = np.array([[100.0]])

    assert percent_bias(np.array([110.0]), One, np.ones((1, 1), bool)) == pytest.approx(10.0)


def test_percent_bias_brute_force():
    rng = np.random.default_rng(5)
    _, truth = generate(SimConfig(replicate_seed=2))
    mask = rng.random(truth.y0.shape) < 0.3
    est = rng.uniform(0, 50, truth.y0.shape)
    total, n = 0.0, 0
    for i in range(mask.shape[0]):
        for t in range(mask.shape[1]):
            if mask[i, t]:
                total += abs(est[i, t] - truth.y0[i, t]) / truth.lam[i, t] * 100
                n += 1
    assert percent_bias(est, truth, mask) == pytest.approx(total / n, rel=1e-12, abs=1e-12)


def test_inject_effect_only_touches_treated():
    panel, _ = generate(SimConfig(replicate_seed=4))
    out = inject_effect(panel, 2.0, np.random.default_rng(0))
    diff = out.counts - panel.counts
    assert np.all(diff[~panel.treated] == 0)
    assert np.all(diff[panel.treated] >= 0)
    assert out.counts is not panel.counts


def test_seed_derivation():
    assert replicate_seed(2024, 0) == replicate_seed(2024, 0)
    assert replicate_seed(2024, 0) != replicate_seed(2024, 1)
    assert job_seed(1, 0, "vanilla:3") != job_seed(1, 0, "space:3")


def test_method_spec_parse():
    assert MethodSpec.parse("space_time_ar:3") == MethodSpec("space_time_ar", 3)
    assert MethodSpec.parse("soft_impute").label == "soft_impute"
    assert MethodSpec.parse("als:7").family == ""
    with pytest.raises(ValueError, match="needs a rank"):
        MethodSpec.parse("vanilla")
    with pytest.raises(ValueError, match="at least 1"):
        MethodSpec.parse("als:0")


def _ref_config(**kw):
    base = dict(alphas=(-5.0, -7.0), methods=("oracle", "zero"), replicates=4, seed=7)
    base.update(kw)
    return BenchmarkConfig(**base)


def test_benchmark_reference_methods(tmp_path):
    cfg = _ref_config()
    rows = benchmark(cfg, tmp_path, header="# test\n")
    assert len(rows) == 2 * 2 * 4
    assert all(r["error"] == "" for r in rows)
    # the zero estimator's bias is 100 * mean(Y / lambda), computed independently here
    for r in rows:
        if r["method"] != "zero":
            continue
        panel, truth = generate(SimConfig(alpha=float(r["alpha"]),
                                          replicate_seed=replicate_seed(7, int(r["replicate"]))))
        m = panel.treated
        assert float(r["bias_pct"]) == pytest.approx(100 * np.mean(truth.y0[m] / truth.lam[m]),
                                                     rel=1e-5)
    table = aggregate(rows)
    assert set(table) == {("oracle", "", 0), ("zero", "", 0)}
    oracle = table[("oracle", "", 0)]
    assert oracle[(-7.0, 0.1, 0)][0] / oracle[(-5.0, 0.1, 0)][0] > 1.5
    for cell, (mean, q25, q75, n) in oracle.items():
        vals = [float(r["bias_pct"]) for r in rows
                if r["method"] == "oracle" and float(r["alpha"]) == cell[0]]
        assert mean == pytest.approx(np.mean(vals)) and n == 4 and q25 <= q75

    with open(tmp_path / "bias_table.csv") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    table_rows = list(csv.reader(lines))
    assert len(table_rows) == 1 + 2
    assert len(table_rows[0]) == 3 + 2 * 4


def test_benchmark_resume_equivalence(tmp_path):
    cfg = _ref_config(replicates=3)
    benchmark(cfg, tmp_path / "a", max_jobs=5)
    assert len(read_replicates(tmp_path / "a" / "replicates.csv")) == 5
    resumed = benchmark(cfg, tmp_path / "a")
    fresh = benchmark(cfg, tmp_path / "b")
    assert resumed == fresh
    assert ((tmp_path / "a" / "replicates.csv").read_bytes()
            == (tmp_path / "b" / "replicates.csv").read_bytes())


def test_benchmark_records_failures(tmp_path, monkeypatch):
    import stmc.simulate as sim

    def broken(*args):
        raise sim.baselines.BaselineError("synthetic failure")

    monkeypatch.setattr(sim, "_baseline_estimate", broken)
    cfg = _ref_config(methods=("oracle", "als:2"), replicates=2, alphas=(-5.0,))
    rows = benchmark(cfg, tmp_path)
    failed = [r for r in rows if r["method"] == "als"]
    assert len(failed) == 2
    assert all(r["bias_pct"] == "nan" and "synthetic failure" in r["error"] for r in failed)
    assert all(r["error"] == "" for r in rows if r["method"] == "oracle")
    assert np.isnan(aggregate(rows)[("als", "", 2)][(-5.0, 0.1, 0)][0])
