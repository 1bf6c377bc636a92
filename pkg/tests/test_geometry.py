import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from app.config import settings
from app.services.errors import GraphError, ObservationIndexError
from app.services.geometry import (Field, Mesh, ObservationOperator, apply_observation, build_random_geometric_graph,
                                   build_rectangle_mesh, graph_laplacian, inverse_count_draw, normalized_adjacency,
                                   random_observation, stack_observations)


def test_rectangle_mesh_layout():
    mesh = build_rectangle_mesh(2.0, 1.0, 4, 3)
    assert mesh.n_nodes == 12
    assert mesh.n_edges == 3 * 3 + 4 * 2
    # vertex k = j * nx + i
    np.testing.assert_allclose(mesh.coords[5], [2.0 / 3.0, 0.5])
    assert mesh.boundary.sum() == 12 - 2
    assert mesh.is_connected()


def test_rectangle_mesh_rejects_bad_sides():
    with pytest.raises(GraphError):
        build_rectangle_mesh(0.0, 1.0, 4, 4)
    with pytest.raises(GraphError):
        build_rectangle_mesh(1.0, 1.0, 1, 4)


def test_normalized_adjacency_properties(five_node_mesh):
    a = normalized_adjacency(five_node_mesh).toarray()
    np.testing.assert_allclose(a, a.T, atol=1e-14)
    eig = np.linalg.eigvalsh(a)
    assert eig.max() == pytest.approx(1.0, abs=1e-12), "top eigenvalue of the normalized adjacency is 1"
    assert eig.min() > -1.0


def test_laplacian_rows_sum_to_zero(five_node_mesh):
    lap = graph_laplacian(five_node_mesh).toarray()
    np.testing.assert_allclose(lap.sum(axis=1), 0.0)
    np.testing.assert_allclose(np.diag(lap), [3, 3, 3, 3, 4])


def test_adjacency_goes_sparse_above_limit(monkeypatch, five_node_mesh):
    dense = normalized_adjacency(five_node_mesh)
    monkeypatch.setattr(settings, "dense_node_limit", 3)
    sparse = normalized_adjacency(five_node_mesh)
    assert not dense.is_sparse and sparse.is_sparse
    np.testing.assert_allclose(sparse.toarray(), dense.toarray())


def test_disconnected_mesh_warns(caplog):
    mesh = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]]), np.array([[0, 1]]))
    normalized_adjacency(mesh)
    assert "disconnected" in caplog.text


@hsettings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_adjacency_permutation_equivariance(seed):
    r = np.random.default_rng(seed)
    mesh = build_random_geometric_graph(12, r, k=3)
    perm = r.permutation(mesh.n_nodes)
    a = normalized_adjacency(mesh).toarray()
    b = normalized_adjacency(mesh.permuted(perm)).toarray()
    np.testing.assert_allclose(b, a[np.ix_(perm, perm)], atol=1e-14)


@hsettings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 40))
def test_random_geometric_graph_is_connected(seed, n):
    mesh = build_random_geometric_graph(n, np.random.default_rng(seed), k=2)
    assert mesh.is_connected()
    assert mesh.n_nodes == n


def test_mesh_validation():
    with pytest.raises(GraphError):
        Mesh(np.zeros((3, 2)), np.array([[0, 3]]))
    with pytest.raises(GraphError):
        Mesh(np.zeros((3, 2)), np.array([[1, 1]]))


def test_field_validation():
    f = Field(np.arange(6.0).reshape(3, 2), ("u", "f"))
    np.testing.assert_array_equal(f.channel("f"), [1.0, 3.0, 5.0])
    with pytest.raises(ValueError):
        Field(np.ones((3, 2)), ("u",))
    with pytest.raises(ValueError):
        Field(np.array([1.0, np.nan]), ("u",))


def test_observation_operator():
    with pytest.raises(ObservationIndexError):
        ObservationOperator((1, 1))
    with pytest.raises(ValueError):
        ObservationOperator((1,), sigma=-1.0)
    op = ObservationOperator((2, 0), channel=1)
    values = np.arange(8.0).reshape(4, 2)
    np.testing.assert_array_equal(op.select(values), [5.0, 1.0])
    batch = np.stack([values, values + 10])
    np.testing.assert_array_equal(op.select(batch), [[5.0, 1.0], [15.0, 11.0]])
    with pytest.raises(ObservationIndexError):
        op.check(2, 2)


def test_apply_observation_noise(rng):
    field = Field(np.linspace(0, 1, 10), ("u",))
    exact = apply_observation(ObservationOperator((1, 4, 7)), field, rng)
    np.testing.assert_array_equal(exact, field.values[[1, 4, 7], 0])
    noisy = apply_observation(ObservationOperator(tuple(range(10)), sigma=0.1), field, rng)
    assert 0.02 < np.std(noisy - field.values[:, 0]) < 0.3


def test_stack_observations():
    values = np.arange(6.0).reshape(3, 2)
    ops = [ObservationOperator((0,), channel=0), ObservationOperator((2, 1), channel=1)]
    np.testing.assert_array_equal(stack_observations(ops, values), [0.0, 5.0, 3.0])


def test_random_observation(rng):
    op = random_observation(20, 5, rng, sigma=0.01)
    assert op.size == 5 and len(set(op.node_ids)) == 5
    assert list(op.node_ids) == sorted(op.node_ids)
    # capped at the candidate pool
    assert random_observation(20, 50, rng, candidates=np.arange(3)).node_ids == (0, 1, 2)


def test_inverse_count_distribution(rng):
    draws = np.array([inverse_count_draw(rng, 5, 50) for _ in range(20000)])
    assert draws.min() >= 5 and draws.max() <= 50
    ratio = np.mean(draws == 5) / np.mean(draws == 50)
    assert 6.0 < ratio < 14.0, f"P(5)/P(50) should be near 10, got {ratio:.2f}"


def test_two_vertex_adjacency_by_hand():
    # unit edge: weight 1/2, degree 3/2
    mesh = Mesh(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[0, 1]]))
    np.testing.assert_allclose(normalized_adjacency(mesh).toarray(), [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-14)


def test_single_vertex_adjacency_is_one():
    mesh = Mesh(np.array([[0.3, 0.7]]), np.zeros((0, 2), dtype=int))
    np.testing.assert_allclose(normalized_adjacency(mesh).toarray(), [[1.0]])
    np.testing.assert_allclose(graph_laplacian(mesh).toarray(), [[0.0]])


def test_path_laplacian_spectrum():
    mesh = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), np.array([[0, 1], [1, 2]]))
    lap = graph_laplacian(mesh).toarray()
    np.testing.assert_allclose(lap, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    np.testing.assert_allclose(np.linalg.eigvalsh(lap), [0.0, 1.0, 3.0], atol=1e-12)
