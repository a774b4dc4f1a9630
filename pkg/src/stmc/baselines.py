"""Frequentist matrix-completion baselines on incidence-rate matrices.

Every completer takes a :class:`RateMatrix` and returns a
:class:`Completion` whose ``matrix`` agrees with the input at observed
cells and holds the method's imputation at the missing ones.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class BaselineError(RuntimeError):
    pass


@dataclass(frozen=True)
class RateMatrix:
    values: np.ndarray       # (N, T); entries at unobserved cells are ignored
    observed: np.ndarray     # (N, T) bool

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        o = np.asarray(self.observed, dtype=bool)
        if v.shape != o.shape or v.ndim != 2:
            raise ValueError("values and observed must be matching 2-d grids")
        if not np.all(np.isfinite(v[o])):
            raise ValueError("rate matrix has non-finite observed entries")
        object.__setattr__(self, "values", np.where(o, v, 0.0))
        object.__setattr__(self, "observed", o)

    @classmethod
    def from_panel(cls, panel, observed=None, denominator: float = 1e5) -> "RateMatrix":
        """Rates per ``denominator`` person-years; ``observed`` defaults to the untreated cells."""
        obs = ~panel.treated if observed is None else observed
        return cls(panel.counts / panel.populations * denominator, obs)

    def require_coverage(self) -> None:
        if not self.observed.any(axis=1).all() or not self.observed.any(axis=0).all():
            raise BaselineError("every row and column needs at least one observed entry")


@dataclass
class Completion:
    matrix: np.ndarray
    converged: bool
    iterations: int
    objective: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)


def _finish(m: RateMatrix, fit: np.ndarray, converged: bool, it: int, obj, **extras) -> Completion:
    return Completion(np.where(m.observed, m.values, fit), converged, it, obj, extras)


def _rel_change(new, old) -> float:
    den = max(np.linalg.norm(old), np.linalg.norm(new))
    return 0.0 if den == 0 else float((np.linalg.norm(new - old) / den) ** 2)


def _svd_shrink(z: np.ndarray, lam: float):
    u, s, vt = np.linalg.svd(z, full_matrices=False)
    s = np.maximum(s - lam, 0.0)
    r = int(np.count_nonzero(s))
    return (u[:, :r] * s[:r]) @ vt[:r], s, u[:, :r], vt[:r]


# ALS ------------------------------------------------------------------------------

def als_complete(m: RateMatrix, K: int, ridge: float = 0.1, iters: int = 5000,
                 tol: float = 1e-8, seed: int = 0) -> Completion:
    """Rank-``K`` factorisation ``A B'`` of the observed entries by alternating ridge regressions.

    Minimises ``sum_obs (M - A B')**2 + ridge (|A|^2 + |B|^2)``.
    """
    m.require_coverage()
    n, t = m.values.shape
    rng = np.random.default_rng(seed)
    scale = np.sqrt(max(np.abs(m.values[m.observed]).mean(), 1e-12) / K)
    A = scale * (1.0 + 0.1 * rng.standard_normal((n, K)))
    B = scale * (1.0 + 0.1 * rng.standard_normal((t, K)))
    W = m.observed.astype(float)
    M = m.values
    eye = ridge * np.eye(K)

    def objective():
        r = W * (M - A @ B.T)
        return float((r * r).sum() + ridge * ((A * A).sum() + (B * B).sum()))

    obj = [objective()]
    converged = False
    for it in range(1, iters + 1):
        for i in range(n):
            Bi = B[m.observed[i]]
            A[i] = np.linalg.solve(Bi.T @ Bi + eye, Bi.T @ M[i, m.observed[i]])
        for j in range(t):
            Aj = A[m.observed[:, j]]
            B[j] = np.linalg.solve(Aj.T @ Aj + eye, Aj.T @ M[m.observed[:, j], j])
        obj.append(objective())
        if abs(obj[-2] - obj[-1]) <= tol * max(obj[-2], 1e-300):
            converged = True
            break
    if not converged:
        log.warning("ALS hit the iteration cap (%d)", iters)
    return _finish(m, A @ B.T, converged, it, obj, A=A, B=B)


# soft-impute ------------------------------------------------------------------------

def soft_impute(m: RateMatrix, lam: float, iters: int = 2000, tol: float = 1e-9,
                debias: bool = False, init: np.ndarray | None = None) -> Completion:
    """Nuclear-norm completion by iterated SVD soft-thresholding.

    Each step fills the missing cells with the current estimate and
    shrinks the singular values by ``lam``. With ``debias`` the singular
    values at the final rank are refit by least squares on the observed
    entries and polished by fixed-rank hard-impute, removing the shrinkage
    bias.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    o = m.observed
    Z = np.zeros_like(m.values) if init is None else np.array(init, dtype=float)
    obj = []
    converged = False
    U = Vt = np.zeros((0, 0))
    for it in range(1, iters + 1):
        filled = np.where(o, m.values, Z)
        Z_new, s, U, Vt = _svd_shrink(filled, lam)
        r = np.where(o, m.values - Z_new, 0.0)
        obj.append(0.5 * float((r * r).sum()) + lam * float(s.sum()))
        delta = _rel_change(Z_new, Z)
        Z = Z_new
        if delta < tol:
            converged = True
            break
    if debias and U.shape[1]:
        Z = _debias(m, U, Vt)
    return _finish(m, Z, converged, it, obj, rank=U.shape[1])


def _debias(m: RateMatrix, U: np.ndarray, Vt: np.ndarray, iters: int = 2000,
            tol: float = 1e-12) -> np.ndarray:
    """Remove shrinkage bias at the selected rank ``r``.

    First refits a full ``r x r`` core ``S`` in ``U S Vt`` by least squares on
    the observed cells, then runs fixed-rank hard-impute (fill, truncated
    SVD) from there, which also corrects the shrunken singular subspaces.
    """
    ii, tt = np.nonzero(m.observed)
    r = U.shape[1]
    design = (U[ii][:, :, None] * Vt.T[tt][:, None, :]).reshape(len(ii), r * r)
    core, *_ = np.linalg.lstsq(design, m.values[ii, tt], rcond=None)
    Z = U @ core.reshape(r, r) @ Vt
    for _ in range(iters):
        u, s, vt = np.linalg.svd(np.where(m.observed, m.values, Z), full_matrices=False)
        Z_new = (u[:, :r] * s[:r]) @ vt[:r]
        delta = _rel_change(Z_new, Z)
        Z = Z_new
        if delta < tol:
            break
    return Z


# SVT ---------------------------------------------------------------------------------

def svt(m: RateMatrix, threshold: float, step: float | None = None, iters: int = 5000,
        tol: float = 1e-6, divergence_window: int = 50) -> Completion:
    """Singular value thresholding with a dual ascent on the observed residual.

    ``X = shrink(Y, threshold)``; ``Y += step * P_obs(M - X)``. Stops when
    the observed relative residual is below ``tol``. The default step is
    ``1.2 / p`` for observed fraction ``p``. Raises if the residual grows
    for ``divergence_window`` consecutive iterations.
    """
    o = m.observed
    p = o.mean()
    if step is None:
        step = 1.2 / p
    norm_obs = np.linalg.norm(m.values[o])
    if norm_obs == 0:
        return _finish(m, np.zeros_like(m.values), True, 0, [])
    # warm start: k0 steps so the first shrinkage is non-trivial
    k0 = int(np.ceil(threshold / (step * np.linalg.norm(m.values, 2))))
    Y = k0 * step * m.values
    X = np.zeros_like(m.values)
    hist = []
    growth = 0
    converged = False
    for it in range(1, iters + 1):
        X, *_ = _svd_shrink(Y, threshold)
        resid = np.where(o, m.values - X, 0.0)
        rel = np.linalg.norm(resid) / norm_obs
        if not np.isfinite(rel):
            raise BaselineError("SVT diverged (non-finite residual)")
        growth = growth + 1 if hist and rel > hist[-1] else 0
        hist.append(rel)
        if rel < tol:
            converged = True
            break
        if growth >= divergence_window:
            raise BaselineError(f"SVT diverged: residual grew for {growth} iterations "
                                f"(step {step:.3g} too large)")
        Y = Y + step * resid
    return _finish(m, X, converged, it, hist)


# nuclear norm with two-way fixed effects ------------------------------------------------

def _two_way(R: np.ndarray, o: np.ndarray, iters: int = 200, tol: float = 1e-12):
    """Least-squares row and column effects on observed cells (backfitting)."""
    n, t = R.shape
    row = np.zeros(n)
    col = np.zeros(t)
    cnt_r = o.sum(axis=1)
    cnt_c = o.sum(axis=0)
    for _ in range(iters):
        row_new = np.where(o, R - col[None, :], 0.0).sum(axis=1) / cnt_r
        col_new = np.where(o, R - row_new[:, None], 0.0).sum(axis=0) / cnt_c
        done = max(np.abs(row_new - row).max(), np.abs(col_new - col).max()) < tol
        row, col = row_new, col_new
        if done:
            break
    return row, col


def nuclear_fe(m: RateMatrix, lam: float, iters: int = 2000, tol: float = 1e-9) -> Completion:
    """Two-way fixed effects plus a nuclear-norm-penalised low-rank term.

    Alternates (a) least-squares row/column effects on the observed
    residual ``M - L`` and (b) one soft-impute step on ``M - row - col``.
    ``lam = inf`` gives plain two-way fixed-effects imputation.
    """
    m.require_coverage()
    o = m.observed
    M = m.values
    L = np.zeros_like(M)
    obj = []
    converged = False
    for it in range(1, iters + 1):
        row, col = _two_way(M - L, o)
        fe = row[:, None] + col[None, :]
        if np.isinf(lam):
            L_new, s = np.zeros_like(M), np.zeros(1)
        else:
            L_new, s, *_ = _svd_shrink(np.where(o, M - fe, L), lam)
        r = np.where(o, M - fe - L_new, 0.0)
        obj.append(0.5 * float((r * r).sum()) + (0.0 if np.isinf(lam) else lam * float(s.sum())))
        delta = _rel_change(L_new, L)
        L = L_new
        if np.isinf(lam) or delta < tol:
            converged = True
            break
    row, col = _two_way(M - L, o)
    return _finish(m, row[:, None] + col[None, :] + L, converged, it, obj,
                   row_effects=row, col_effects=col, low_rank=L)


# cross-validation ----------------------------------------------------------------------

Completer = Callable[[RateMatrix, float], Completion]


def cv_tune(method: Completer, m: RateMatrix, grid: Sequence[float], folds: int = 10,
            rng: np.random.Generator | None = None, stronger: str = "larger") -> float:
    """Pick the tuning value with the lowest mean held-out RMSE over ``folds`` folds.

    ``stronger`` says which direction of the grid regularises more
    (``"larger"`` for penalties, ``"smaller"`` for ranks); ties go to the
    stronger end.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty tuning grid")
    if len(grid) == 1:
        return grid[0]
    if stronger not in ("larger", "smaller"):
        raise ValueError("stronger must be 'larger' or 'smaller'")
    rng = np.random.default_rng(0) if rng is None else rng
    obs = np.argwhere(m.observed)
    if len(obs) < folds:
        raise ValueError(f"need at least {folds} observed entries for {folds}-fold CV")
    fold_of = rng.permutation(len(obs)) % folds
    scores = np.zeros(len(grid))
    for f in range(folds):
        held = obs[fold_of == f]
        train = m.observed.copy()
        train[held[:, 0], held[:, 1]] = False
        mf = RateMatrix(m.values, train)
        truth = m.values[held[:, 0], held[:, 1]]
        for g, val in enumerate(grid):
            try:
                fit = method(mf, val).matrix[held[:, 0], held[:, 1]]
                scores[g] += np.sqrt(np.mean((fit - truth) ** 2))
            except BaselineError:
                scores[g] = np.inf
    scores /= folds
    order = sorted(range(len(grid)), key=lambda g: grid[g], reverse=(stronger == "larger"))
    best = min(order, key=lambda g: scores[g])  # min keeps the first (strongest) on ties
    return grid[best]
