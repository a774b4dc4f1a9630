"""The NUTS sampler on its own, with a target whose answer is known.

A correlated 2-D Gaussian has closed-form moments. We check the posterior
means and covariance, then use the convergence diagnostics. R-hat should be
near 1 for well-mixed chains. It should be well above 1 when the chains are
started far apart and stopped early.
"""

import numpy as np

from stmc.sampler import SamplerConfig, ess, rhat, sample

cov = np.array([[1.0, 0.9], [0.9, 1.0]])
prec = np.linalg.inv(cov)
mu = np.array([1.0, -2.0])


def logp_grad(x):
    d = x - mu
    g = -prec @ d
    return 0.5 * d @ g, g


cfg = SamplerConfig(iterations=2000, warmup=1000, chains=4, seed=3)
inits = [np.random.default_rng(c).normal(size=2) for c in range(4)]
draws = sample(logp_grad, inits, cfg)
x = draws.params.reshape(-1, 2)
print("mean", x.mean(axis=0).round(3), "target", mu)
print("cov\n", np.cov(x, rowvar=False).round(3))
for j in range(2):
    chains = draws.params[:, :, j]
    print(f"x[{j}]: R-hat {rhat(chains):.4f}, ESS {ess(chains):.0f} of {chains.size}")
print("mean tree depth", draws.tree_depth.mean().round(2),
      "divergences", int(draws.divergences.sum()))

# chains stuck in separate places: no warmup, two starts 40 sd apart, few draws
bad = sample(logp_grad, [mu + 40, mu - 40],
             SamplerConfig(iterations=30, warmup=0, chains=2, seed=1))
print(f"separated short chains: R-hat {rhat(bad.params[:, :, 0]):.2f}")
