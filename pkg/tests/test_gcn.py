import numpy as np
import pytest

from app.config import settings
from app.services import autodiff as ad
from app.services.errors import ShapeMismatchError
from app.services.gcn import (Architecture, GeometricAutoencoder, decode_batch_normalized, decoder_tensor,
                              encode_batch, encoder_tensor, expected_shapes, gcn_nonlocal_layer_apply,
                              init_params, regress_np, regressor_tensor)
from app.services.geometry import build_random_geometric_graph, build_rectangle_mesh


@pytest.fixture
def params(tiny_arch):
    return init_params(tiny_arch, np.random.default_rng(0))


def _leaves(params):
    return {k: ad.tensor(v) for k, v in params.items()}


def test_shapes_follow_the_architecture(tiny_arch, params):
    assert set(params) == set(expected_shapes(tiny_arch))
    assert params["enc.l1.W"].shape == (8, 3)
    assert params["dec.in.W"].shape == (2 + 3, 4)
    assert np.all(params["dec.l0.b"] == 0.0)
    dm = expected_shapes(Architecture(kind="direct-map", d_z=3, channels=4, n_layers=2))
    assert dm["dm.in.W"] == (4, 4) and not any(k.startswith("enc") for k in dm)


def test_tensor_and_numpy_paths_agree(five_node_mesh, tiny_arch, params, rng):
    u = rng.standard_normal((5, 1))
    z_t = encoder_tensor(five_node_mesh, u, _leaves(params), tiny_arch).data
    z_np = encode_batch(five_node_mesh, u, params, tiny_arch)
    assert z_t.shape == (1, 3)
    np.testing.assert_allclose(z_t, z_np, rtol=1e-12, atol=1e-14)

    Z = rng.standard_normal((4, 3))
    batch = decode_batch_normalized(five_node_mesh, Z, params, tiny_arch)
    assert batch.shape == (4, 5, 1)
    for i in range(4):
        single = decoder_tensor(five_node_mesh, ad.tensor(Z[i:i + 1]), _leaves(params), tiny_arch).data
        np.testing.assert_allclose(single, batch[i], rtol=1e-12, atol=1e-14)


def test_permutation_equivariance(tiny_arch, params, rng):
    mesh = build_random_geometric_graph(15, rng, k=3)
    perm = rng.permutation(15)
    other = mesh.permuted(perm)
    u = rng.standard_normal((15, 1))
    z = encode_batch(mesh, u, params, tiny_arch)
    np.testing.assert_allclose(encode_batch(other, u[perm], params, tiny_arch), z, atol=1e-12)
    Z = rng.standard_normal((2, 3))
    a = decode_batch_normalized(mesh, Z, params, tiny_arch)
    b = decode_batch_normalized(other, Z, params, tiny_arch)
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_sparse_and_dense_operators_agree(monkeypatch, tiny_arch, params, rng):
    Z = rng.standard_normal((3, 3))
    u = rng.standard_normal((20, 1))
    dense_mesh = build_rectangle_mesh(1.0, 1.0, 5, 4)
    monkeypatch.setattr(settings, "dense_node_limit", 4)
    sparse_mesh = build_rectangle_mesh(1.0, 1.0, 5, 4)
    assert sparse_mesh.adjacency().is_sparse
    monkeypatch.setattr(settings, "dense_node_limit", 256)
    assert not dense_mesh.adjacency().is_sparse

    np.testing.assert_allclose(decode_batch_normalized(sparse_mesh, Z, params, tiny_arch),
                               decode_batch_normalized(dense_mesh, Z, params, tiny_arch), atol=1e-12)
    np.testing.assert_allclose(encode_batch(sparse_mesh, u, params, tiny_arch),
                               encode_batch(dense_mesh, u, params, tiny_arch), atol=1e-12)
    t = encoder_tensor(sparse_mesh, u, _leaves(params), tiny_arch).data
    np.testing.assert_allclose(t, encode_batch(dense_mesh, u, params, tiny_arch), atol=1e-12)


def test_latents_are_not_bounded_by_the_activation(five_node_mesh, tiny_arch, params):
    scaled = {k: 10.0 * v for k, v in params.items()}
    z = encode_batch(five_node_mesh, np.ones((5, 1)), scaled, tiny_arch)
    assert np.max(np.abs(z)) > 1.0


def test_layer_shape_errors(five_node_mesh):
    x = ad.tensor(np.ones((5, 3)))
    with pytest.raises(ShapeMismatchError):
        gcn_nonlocal_layer_apply(five_node_mesh.adjacency(), x, ad.tensor(np.ones((3, 2))), ad.tensor(np.zeros((1, 2))))
    with pytest.raises(ShapeMismatchError):
        gcn_nonlocal_layer_apply(np.eye(4), x, ad.tensor(np.ones((6, 2))), ad.tensor(np.zeros((1, 2))))


def test_layer_sees_the_graph_mean():
    # two isolated vertices still exchange information through the mean channel
    w = np.vstack([np.zeros((1, 1)), np.ones((1, 1))])
    out = gcn_nonlocal_layer_apply(np.eye(2), ad.tensor([[1.0], [3.0]]), ad.tensor(w), ad.tensor([[0.0]]), None)
    np.testing.assert_allclose(out.data, [[2.0], [2.0]])


def test_direct_map_regressor_paths_agree(five_node_mesh, rng):
    arch = Architecture(kind="direct-map", d_z=3, channels=4, n_layers=2)
    params = init_params(arch, rng)
    x = rng.standard_normal((5, 4))
    t = regressor_tensor(five_node_mesh, ad.tensor(x), _leaves(params), arch, "dm").data
    np.testing.assert_allclose(regress_np(five_node_mesh, x, params, arch, "dm")[0], t, atol=1e-12)


def test_autoencoder_wrapper_uses_field_units(five_node_mesh, tiny_arch, params, rng):
    model = GeometricAutoencoder(tiny_arch, params, mean=np.array([1.0]), std=np.array([2.0]), channel_names=("u",))
    Z = rng.standard_normal((2, 3))
    raw = decode_batch_normalized(five_node_mesh, Z, params, tiny_arch)
    np.testing.assert_allclose(model.decode_batch(Z, five_node_mesh), raw * 2.0 + 1.0)
    np.testing.assert_allclose(model.decode(Z[0], five_node_mesh).values, raw[0] * 2.0 + 1.0)
    field = model.decode(Z[1], five_node_mesh)
    np.testing.assert_allclose(model.encode(field, five_node_mesh),
                               encode_batch(five_node_mesh, raw[1], params, tiny_arch)[0], atol=1e-12)


def test_zero_weights_encode_to_the_origin(five_node_mesh, tiny_arch, rng):
    zeros = {k: np.zeros_like(v) for k, v in init_params(tiny_arch, rng).items()}
    u = rng.standard_normal((5, 1))
    np.testing.assert_array_equal(encode_batch(five_node_mesh, u, zeros, tiny_arch), np.zeros((1, 3)))


def test_zero_weights_decode_to_the_channel_means(five_node_mesh, tiny_arch, rng):
    zeros = {k: np.zeros_like(v) for k, v in init_params(tiny_arch, rng).items()}
    model = GeometricAutoencoder(tiny_arch, zeros, mean=np.array([0.7]), std=np.array([3.0]), channel_names=("u",))
    field = model.decode(rng.standard_normal(3), five_node_mesh)
    np.testing.assert_allclose(field.values, np.full((5, 1), 0.7))
