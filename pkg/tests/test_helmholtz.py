import numpy as np
import pytest
import scipy.sparse.linalg as spla

from app.services.errors import GraphError
from app.services.geometry import build_random_geometric_graph
from app.services.helmholtz import (CHANNELS, HelmholtzProblemSpec, helmholtz_operator, leading_fifth,
                                    sample_helmholtz_dataset, solve_graph_helmholtz)


@pytest.fixture
def graph(rng):
    return build_random_geometric_graph(60, rng, k=5)


def test_solution_satisfies_the_system(graph, rng):
    spec = HelmholtzProblemSpec.sample(graph, rng)
    mesh, field = solve_graph_helmholtz(spec)
    assert field.channel_names == CHANNELS
    np.testing.assert_allclose(field.channel("f"), spec.forcing())
    A = helmholtz_operator(mesh, spec.kappa, spec.gamma)
    u = spla.spsolve(A, spec.forcing().astype(np.complex128))
    assert np.max(np.abs(A @ u - spec.forcing())) < 1e-8
    np.testing.assert_allclose(field.channel("u"), np.abs(u), rtol=1e-10, atol=1e-14)


def test_source_is_in_the_leading_fifth(graph, rng):
    lead = set(leading_fifth(graph).tolist())
    for _ in range(20):
        assert HelmholtzProblemSpec.sample(graph, rng).source_center in lead


def test_source_outside_leading_fifth_is_rejected(graph):
    far = int(np.argmax(graph.coords[:, 0]))
    with pytest.raises(GraphError):
        HelmholtzProblemSpec(graph, far)


def test_support_contains_the_centre(graph, rng):
    spec = HelmholtzProblemSpec.sample(graph, rng)
    assert spec.source_center in spec.support()
    assert spec.forcing()[spec.source_center] == pytest.approx(spec.source_amplitude)


def test_linearity_in_the_forcing(graph, rng):
    spec = HelmholtzProblemSpec.sample(graph, rng)
    _, one = solve_graph_helmholtz(spec)
    _, two = solve_graph_helmholtz(spec, forcing=2.0 * spec.forcing())
    np.testing.assert_allclose(two.channel("u"), 2.0 * one.channel("u"), rtol=1e-10)


def test_dataset_specs_line_up(rng):
    ds, specs = sample_helmholtz_dataset(3, 30, rng)
    assert len(ds) == 3 and len(specs) == 3 and ds.n_channels == 2
    for (mesh, field), spec in zip(ds.samples, specs):
        assert mesh is spec.mesh
        np.testing.assert_allclose(field.channel("f"), spec.forcing())


def test_zero_forcing_gives_zero_field(graph, rng):
    spec = HelmholtzProblemSpec.sample(graph, rng)
    _, field = solve_graph_helmholtz(spec, forcing=np.zeros(graph.n_nodes))
    assert np.all(field.channel("u") == 0.0)
    assert np.all(field.channel("f") == 0.0)


def test_damping_bounds_the_response(rng):
    # every eigenvalue of L - kappa + i gamma kappa has modulus >= gamma kappa
    mesh = build_random_geometric_graph(10, rng, k=3)
    for _ in range(5):
        spec = HelmholtzProblemSpec.sample(mesh, rng, kappa=2.0, gamma=0.1)
        f = rng.standard_normal(mesh.n_nodes)
        _, field = solve_graph_helmholtz(spec, forcing=f)
        assert np.linalg.norm(field.channel("u")) <= np.linalg.norm(f) / (spec.gamma * spec.kappa) + 1e-12


@pytest.mark.parametrize("gamma", [0.0, 1.5])
def test_damping_outside_range_is_rejected(graph, gamma):
    centre = int(leading_fifth(graph)[0])
    with pytest.raises(ValueError):
        HelmholtzProblemSpec(graph, centre, gamma=gamma)
