"""Adjacency structures, ICAR structure matrices and Leroux precisions."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


@dataclass(frozen=True)
class Adjacency:
    """Undirected graph on ``size`` nodes stored as sorted unique edges ``(i, j)``, ``i < j``."""

    size: int
    edges: tuple

    def __post_init__(self):
        clean = set()
        for a, b in self.edges:
            a, b = int(a), int(b)
            if a == b:
                raise ValueError(f"self-loop at node {a}")
            if not (0 <= a < self.size and 0 <= b < self.size):
                raise ValueError(f"edge ({a}, {b}) out of range for size {self.size}")
            clean.add((min(a, b), max(a, b)))
        object.__setattr__(self, "edges", tuple(sorted(clean)))

    @property
    def edge_array(self) -> np.ndarray:
        """(n_edges, 2) integer array."""
        return np.array(self.edges, dtype=int).reshape(-1, 2)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def matrix(self) -> np.ndarray:
        w = np.zeros((self.size, self.size))
        e = self.edge_array
        w[e[:, 0], e[:, 1]] = 1.0
        w[e[:, 1], e[:, 0]] = 1.0
        return w

    def degrees(self) -> np.ndarray:
        e = self.edge_array
        return np.bincount(e.ravel(), minlength=self.size).astype(float)

    def n_components(self) -> int:
        e = self.edge_array
        g = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(self.size, self.size))
        return connected_components(g, directed=False)[0]

    def icar_rank(self) -> int:
        return self.size - self.n_components()


@dataclass(frozen=True)
class PrecisionMatrix:
    matrix: np.ndarray
    positive_definite: bool

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def cholesky(self) -> np.ndarray:
        """Lower Cholesky factor; refuses ICAR structure matrices."""
        if not self.positive_definite:
            raise linalg.LinAlgError("precision matrix is not flagged positive definite")
        return linalg.cholesky(self.matrix, lower=True)


def path_adjacency(T: int) -> Adjacency:
    """Consecutive time points are neighbours."""
    if T < 2:
        raise ValueError("a temporal path needs T >= 2")
    return Adjacency(T, tuple((t, t + 1) for t in range(T - 1)))


def icar_structure(adj: Adjacency) -> PrecisionMatrix:
    """Graph Laplacian D - W."""
    w = adj.matrix()
    return PrecisionMatrix(np.diag(w.sum(axis=1)) - w, positive_definite=False)


def leroux_precision(adj: Adjacency, rho: float) -> PrecisionMatrix:
    """rho (D - W) + (1 - rho) I, proper for 0 <= rho < 1."""
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"Leroux rho must lie in [0, 1), got {rho}")
    q = rho * icar_structure(adj).matrix + (1.0 - rho) * np.eye(adj.size)
    return PrecisionMatrix(q, positive_definite=True)


def sample_gmrf(precision: PrecisionMatrix, tau2: float, rng: np.random.Generator) -> np.ndarray:
    """One draw from N(0, tau2 * Q^-1).

    With Q = L L' we solve L' x = z for z ~ N(0, I); then Cov(x) = Q^-1.
    """
    if tau2 <= 0:
        raise ValueError("tau2 must be positive")
    chol = precision.cholesky()
    z = rng.standard_normal(precision.size)
    x = linalg.solve_triangular(chol, z, lower=True, trans="T")
    return np.sqrt(tau2) * x


def knn_lattice_adjacency(n: int, k: int = 4, seed: int = 0) -> tuple[Adjacency, np.ndarray]:
    """Symmetrised k-nearest-neighbour graph on a jittered near-square lattice.

    Returns the adjacency and the (n, 2) coordinates used to build it.
    """
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n)))
    grid = np.array([(r, c) for r in range(side) for c in range(side)], dtype=float)[:n]
    xy = grid + rng.uniform(-0.3, 0.3, size=grid.shape)
    d = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    nearest = np.argsort(d, axis=1)[:, :k]
    edges = [(i, int(j)) for i in range(n) for j in nearest[i]]
    return Adjacency(n, tuple(edges)), xy


def read_edge_list(path: str | Path, unit_ids: Sequence[str]) -> Adjacency:
    """Read a CSV edge list with columns ``id_a, id_b`` resolved against ``unit_ids``."""
    index = {u: i for i, u in enumerate(unit_ids)}
    edges = []
    with open(path, newline="", encoding="utf-8") as fh:
        rows = csv.DictReader(ln for ln in fh if not ln.startswith("#"))
        for lineno, row in enumerate(rows, start=2):
            try:
                edges.append((index[row["id_a"].strip()], index[row["id_b"].strip()]))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: unknown unit id {exc}") from None
    return Adjacency(len(unit_ids), tuple(edges))


def write_edge_list(adj: Adjacency, unit_ids: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id_a", "id_b"])
        for a, b in adj.edges:
            w.writerow([unit_ids[a], unit_ids[b]])


def fixture_unit_ids(n: int = 29) -> list[str]:
    return [f"U{i + 1:02d}" for i in range(n)]


def fixture_adjacency() -> Adjacency:
    """The bundled 29-unit spatial graph used by the simulation study."""
    path = resources.files("stmc") / "data" / "adjacency_29.csv"
    with resources.as_file(path) as p:
        return read_edge_list(p, fixture_unit_ids(29))


def edges_from_pairs(size: int, pairs: Iterable[tuple[int, int]]) -> Adjacency:
    return Adjacency(size, tuple(pairs))
