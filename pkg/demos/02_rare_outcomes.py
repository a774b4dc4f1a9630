"""How estimators degrade as the outcome becomes rare.

Each replicate is generated at two baseline log rates: alpha = -5 (roughly
675 cases per 100k) and alpha = -7 (about 91 per 100k). For every method we
report the percent bias of the counterfactual means on the treated cells,
relative to the true Poisson rate. ``zero`` predicts no cases and scores
about 100. ``oracle`` predicts the true rate and shows the irreducible
Poisson noise in the observed outcomes.

This is a small run of the benchmark that ``stmc benchmark`` drives from a
config file. With three replicates it takes several minutes.
"""

import tempfile

from stmc.simulate import BenchmarkConfig, aggregate, benchmark

cfg = BenchmarkConfig(alphas=(-5.0, -7.0),
                      methods=("oracle", "zero", "als:3", "soft_impute", "vanilla:3"),
                      replicates=3, seed=7, iterations=600, warmup=300, chains=2)

with tempfile.TemporaryDirectory() as out:
    rows = benchmark(cfg, out)
table = aggregate(rows)

print(f"{'method':<14}{'alpha=-5':>12}{'alpha=-7':>12}")
for (name, family, K), cells in table.items():
    label = f"{name}:{K}" if K else name
    vals = [cells[(a, 0.1, 0)][0] for a in cfg.alphas]
    print(f"{label:<14}" + "".join(f"{v:>12.1f}" for v in vals))

failed = [r for r in rows if r["error"]]
if failed:
    print(f"{len(failed)} jobs failed; first error: {failed[0]['error']}")
