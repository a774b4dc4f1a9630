import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stmc.graphs import (Adjacency, edges_from_pairs, fixture_adjacency, fixture_unit_ids,
                         icar_structure, knn_lattice_adjacency, leroux_precision, path_adjacency,
                         read_edge_list, sample_gmrf, write_edge_list)


def test_path_adjacency():
    assert path_adjacency(2).edges == ((0, 1),)
    p3 = path_adjacency(3)
    assert p3.edges == ((0, 1), (1, 2))
    assert p3.degrees().tolist() == [1, 2, 1]
    assert path_adjacency(15).n_edges == 14
    with pytest.raises(ValueError):
        path_adjacency(1)


def test_adjacency_validation():
    with pytest.raises(ValueError, match="self-loop"):
        Adjacency(3, ((1, 1),))
    with pytest.raises(ValueError, match="out of range"):
        Adjacency(3, ((0, 3),))
    assert Adjacency(3, ((1, 0), (0, 1))).edges == ((0, 1),)


def test_icar_structure_path3():
    q = icar_structure(path_adjacency(3))
    assert np.array_equal(q.matrix, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    assert not q.positive_definite
    with pytest.raises(np.linalg.LinAlgError):
        q.cholesky()


def test_icar_rank_two_components():
    adj = edges_from_pairs(5, [(0, 1), (2, 3), (3, 4)])
    q = icar_structure(adj).matrix
    eig = np.linalg.eigvalsh(q)
    assert int(np.sum(eig > 1e-10)) == 3
    assert adj.icar_rank() == 3


def test_leroux_examples():
    adj = path_adjacency(3)
    assert np.array_equal(leroux_precision(adj, 0.0).matrix, np.eye(3))
    q = leroux_precision(adj, 0.99).matrix
    expected = [[1.0, -0.99, 0], [-0.99, 1.99, -0.99], [0, -0.99, 1.0]]
    assert np.allclose(q, expected, atol=1e-12)
    assert np.allclose(np.diag(q), 0.99 * adj.degrees() + 0.01)
    with pytest.raises(ValueError):
        leroux_precision(adj, 1.0)


def test_leroux_fixture_positive_definite_and_trace():
    adj = fixture_adjacency()
    q99 = leroux_precision(adj, 0.99)
    assert np.linalg.eigvalsh(q99.matrix).min() > 0
    q99.cholesky()
    assert np.trace(q99.matrix) > np.trace(leroux_precision(adj, 0.0).matrix)


def test_fixture_adjacency_shape():
    adj = fixture_adjacency()
    assert adj.size == 29
    assert adj.n_components() == 1
    assert adj.degrees().min() >= 1


def test_fixture_matches_regeneration():
    regenerated, _ = knn_lattice_adjacency(29, k=4, seed=0)
    assert regenerated == fixture_adjacency()


def test_edge_list_round_trip(tmp_path):
    adj, _ = knn_lattice_adjacency(10, k=3, seed=4)
    ids = fixture_unit_ids(10)
    write_edge_list(adj, ids, tmp_path / "e.csv")
    assert read_edge_list(tmp_path / "e.csv", ids) == adj


def test_edge_list_unknown_id(tmp_path):
    (tmp_path / "e.csv").write_text("id_a,id_b\nA,Z\n")
    with pytest.raises(ValueError, match="unknown unit id"):
        read_edge_list(tmp_path / "e.csv", ["A", "B"])


def test_gmrf_identity_case():
    rng = np.random.default_rng(0)
    q = leroux_precision(path_adjacency(4), 0.0)
    draws = np.array([sample_gmrf(q, 1.0, rng) for _ in range(10_000)])
    assert abs(draws.mean()) < 0.05
    assert abs(draws.var() - 1.0) < 0.05


def test_gmrf_covariance_matches_inverse():
    # Monte Carlo covariance against the direct inverse, within 3 standard errors entrywise
    adj = path_adjacency(4)
    q = leroux_precision(adj, 0.9)
    tau2 = 0.5
    rng = np.random.default_rng(1)
    n = 100_000
    draws = np.array([sample_gmrf(q, tau2, rng) for _ in range(n)])
    sigma = tau2 * np.linalg.inv(q.matrix)
    emp = np.cov(draws, rowvar=False)
    se = np.sqrt((sigma ** 2 + np.outer(np.diag(sigma), np.diag(sigma))) / n)
    assert np.all(np.abs(emp - sigma) < 3 * se)


def test_gmrf_scale_equivariance_and_reproducibility():
    q = leroux_precision(fixture_adjacency(), 0.99)
    a = sample_gmrf(q, 0.1, np.random.default_rng(5))
    b = sample_gmrf(q, 0.4, np.random.default_rng(5))
    assert np.allclose(b, 2 * a, rtol=1e-12)
    assert np.array_equal(a, sample_gmrf(q, 0.1, np.random.default_rng(5)))


@st.composite
def graphs(draw):
    n = draw(st.integers(2, 9))
    pairs = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))
                          .filter(lambda p: p[0] != p[1]), max_size=20))
    return edges_from_pairs(n, pairs)


@settings(max_examples=60, deadline=None)
@given(graphs(), st.floats(-100, 100), st.floats(0.0, 0.999))
def test_structure_properties(adj, c, rho):
    q = icar_structure(adj).matrix
    assert np.allclose(q, q.T)
    assert np.allclose(q.sum(axis=1), 0.0)
    assert np.linalg.eigvalsh(q).min() > -1e-10
    ones = np.full(adj.size, c)
    assert abs(ones @ q @ ones) < 1e-12 * max(1.0, c * c) * adj.size ** 2
    assert int(np.sum(np.linalg.eigvalsh(q) > 1e-9)) == adj.icar_rank()
    assert np.linalg.eigvalsh(leroux_precision(adj, rho).matrix).min() > 0
