"""Bayesian spatio-temporal matrix completion for causal effects on rare count outcomes.

Modules
-------
panel           panel data container, CSV I/O and treated-cell masking
graphs          adjacency structures, ICAR and Leroux precisions
distributions   log densities of the likelihood and factor priors
model           the six model families: joint log posterior and gradient
sampler         NUTS with dual averaging, predictive draws, R-hat and ESS
counterfactual  ATT estimation from predictive draws
simulate        synthetic panels and the bias benchmark
baselines       ALS, soft-impute, SVT and nuclear-norm fixed-effects completion
preprocess      spline pre-smoothing and the scree summary
cli             the ``stmc`` command-line front end
"""

__version__ = "0.1.0"
