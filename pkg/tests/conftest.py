import numpy as np
import pytest

from stmc.graphs import knn_lattice_adjacency
from stmc.panel import PanelData


def make_panel(counts, populations=None, treated=None, groups=None, times=None, covariates=None,
               smoothed=False) -> PanelData:
    counts = np.asarray(counts, dtype=float)
    n, t = counts.shape
    return PanelData(
        counts=counts,
        populations=np.ones((n, t)) if populations is None else np.asarray(populations, float),
        covariates=np.zeros((n, t, 0)) if covariates is None else covariates,
        treated=np.zeros((n, t), bool) if treated is None else np.asarray(treated, bool),
        unit_ids=tuple(f"u{i}" for i in range(n)),
        group_of_unit=tuple(groups) if groups is not None else ("g",) * n,
        time_labels=tuple(times) if times is not None else tuple(range(2000, 2000 + t)),
        covariate_names=tuple(f"cov_{j}" for j in range(0 if covariates is None else covariates.shape[2])),
        smoothed=smoothed,
    )


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = h
        g.flat[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def toy_panel():
    """6 x 5 panel, two units treated from the fourth period."""
    rng = np.random.default_rng(11)
    pops = rng.uniform(5e3, 5e4, (6, 5))
    counts = rng.poisson(pops * 2e-3)
    treated = np.zeros((6, 5), bool)
    treated[:2, 3:] = True
    return make_panel(counts, pops, treated, groups=["a", "a", "b", "b", "b", "b"])


@pytest.fixture
def toy_adjacency():
    return knn_lattice_adjacency(6, k=2, seed=0)[0]
