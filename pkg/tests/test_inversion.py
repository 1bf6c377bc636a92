import csv

import numpy as np
import pytest

from app.services.errors import ConfigError, DegenerateBatchError, ObservationIndexError, ShapeMismatchError
from app.services.geometry import ObservationOperator, build_rectangle_mesh
from app.services.inversion import (InverseProblem, LinearDecoder, NoisePrior, abc_sample, abc_sample_joint_noise,
                                    ks_statistic, pcn_sample, posterior_stats, read_ensemble, write_ensemble,
                                    write_query_samples)

OBSERVED = (0, 2, 5, 7, 9, 11)


@pytest.fixture
def mesh():
    return build_rectangle_mesh(1.0, 1.0, 4, 3)


@pytest.fixture
def linear():
    r = np.random.default_rng(99)
    return LinearDecoder(0.05 * r.standard_normal((12, 4)), np.zeros(12))


@pytest.fixture
def problem(mesh, linear):
    r = np.random.default_rng(100)
    op = ObservationOperator(OBSERVED, sigma=0.1)
    z_true = r.standard_normal(4)
    u = linear.decode_batch(z_true[None], mesh)[0]
    y = op.select(u) + 0.1 * r.standard_normal(op.size)
    return InverseProblem(mesh, [op], y, linear)


def _uninformative(mesh, d_z=3):
    decoder = LinearDecoder(np.random.default_rng(0).standard_normal((12, d_z)), np.zeros(12))
    return InverseProblem(mesh, [ObservationOperator((), sigma=0.1)], np.zeros(0), decoder)


def test_abc_matches_the_linear_gaussian_posterior(problem, linear):
    ens = abc_sample(problem, 200_000, 500, 1000, np.random.default_rng(1))
    mean, cov = linear.gaussian_posterior(problem.observations, problem.y, 0.1)
    sd = np.sqrt(np.diag(cov))
    assert np.all(np.abs(ens.latents.mean(axis=0) - mean) < 0.3 * sd)
    ratio = ens.latents.std(axis=0, ddof=1) / sd
    assert np.all((ratio > 0.75) & (ratio < 1.3)), ratio


@pytest.mark.slow
def test_pcn_matches_the_linear_gaussian_posterior(problem, linear):
    ens = pcn_sample(problem, 100_000, 0.2, 1_000, np.random.default_rng(2))
    mean, cov = linear.gaussian_posterior(problem.observations, problem.y, 0.1)
    sd = np.sqrt(np.diag(cov))
    assert np.all(np.abs(ens.latents.mean(axis=0) - mean) < 0.1 * sd)
    ratio = ens.latents.std(axis=0, ddof=1) / sd
    assert np.all((ratio > 0.9) & (ratio < 1.1)), ratio
    assert 0.0 < ens.metadata["acceptance_rate"] < 1.0


@pytest.mark.slow
def test_pcn_leaves_the_prior_invariant(mesh):
    ens = pcn_sample(_uninformative(mesh), 100_000, 0.5, 100, np.random.default_rng(3))
    assert ens.metadata["acceptance_rate"] == 1.0
    assert np.all(np.abs(ens.latents.mean(axis=0)) <= 0.05)
    assert np.all(np.abs(ens.latents.std(axis=0) - 1.0) <= 0.05)


def test_pcn_with_unit_step_draws_independently_from_the_prior(mesh):
    ens = pcn_sample(_uninformative(mesh), 50, 1.0, 0, np.random.default_rng(16))
    # z' = 0 * z + w: every step proposes a fresh prior draw and accepts it
    r = np.random.default_rng(16)
    r.standard_normal(3)
    expected = []
    for _ in range(50):
        expected.append(r.standard_normal(3))
        r.uniform()
    np.testing.assert_array_equal(ens.latents, np.array(expected))
    assert ens.metadata["acceptance_rate"] == 1.0


def test_pcn_keeps_chain_order(problem):
    ens = pcn_sample(problem, 3_000, 0.5, 0, np.random.default_rng(17))
    assert ens.metadata["order"] == "chain"
    assert 0.0 < ens.metadata["acceptance_rate"] < 1.0
    # a rejected proposal repeats the previous state
    repeats = np.all(ens.latents[1:] == ens.latents[:-1], axis=1)
    assert repeats.any() and not repeats.all()
    assert not np.all(np.diff(ens.residuals) >= 0.0)

    ranked = ens.ranked()
    assert np.all(np.diff(ranked.residuals) >= 0.0)
    assert ranked.metadata["order"] == "residual"
    np.testing.assert_array_equal(np.sort(ranked.residuals), np.sort(ens.residuals))
    np.testing.assert_array_equal(ens.mode().values, ranked.member(0).values)


def test_joint_noise_without_observations_returns_prior_sigmas(mesh):
    decoder = LinearDecoder(np.random.default_rng(0).standard_normal((12, 3)), np.zeros(12))
    problem = InverseProblem(mesh, [ObservationOperator((), sigma=0.0)], np.zeros(0), decoder, noise_mode="infer")
    prior = NoisePrior()
    ens = abc_sample_joint_noise(problem, prior, 20_000, 20_000, 1_000, np.random.default_rng(18))
    assert ks_statistic(ens.sigmas, prior.draw(np.random.default_rng(19), 100_000)) <= 0.05


def test_abc_without_observations_returns_prior_draws(mesh):
    ens = abc_sample(_uninformative(mesh), 20_000, 20_000, 1_000, np.random.default_rng(4))
    reference = np.random.default_rng(5).standard_normal(100_000)
    assert np.all(ens.residuals == 0.0)
    for k in range(3):
        assert ks_statistic(ens.latents[:, k], reference) <= 0.05


def test_truncation_returns_the_exact_order_statistics(problem, linear):
    n_samples, n_accept, batch = 2_000, 50, 300
    head = abc_sample(problem, n_samples, n_accept, batch, np.random.default_rng(6))

    # redraw every batch and recompute all residuals by hand
    base = int(np.random.default_rng(6).integers(0, 2**63 - 1))
    Z, residuals = [], []
    for i, start in enumerate(range(0, n_samples, batch)):
        r = np.random.default_rng([base, i])
        z = r.standard_normal((min(batch, n_samples - start), 4))
        g = r.standard_normal((z.shape[0], len(OBSERVED)))
        predicted = (z @ linear.A.T + linear.b)[:, list(OBSERVED)]
        Z.append(z)
        residuals.append(np.linalg.norm(problem.y - (predicted + 0.1 * g), axis=1))
    Z, residuals = np.vstack(Z), np.concatenate(residuals)

    best = np.argsort(residuals, kind="stable")[:n_accept]
    np.testing.assert_allclose(head.residuals, np.sort(residuals)[:n_accept], rtol=1e-12)
    np.testing.assert_allclose(head.latents, Z[best], rtol=1e-12)
    assert head.residuals[-1] <= np.delete(residuals, best).min()


def test_results_do_not_depend_on_threads(problem):
    a = abc_sample(problem, 3_000, 30, 250, np.random.default_rng(7), threads=1)
    b = abc_sample(problem, 3_000, 30, 250, np.random.default_rng(7), threads=4)
    np.testing.assert_array_equal(a.latents, b.latents)
    np.testing.assert_array_equal(a.residuals, b.residuals)


def test_fields_are_exact_decodes(problem, linear, tiny_checkpoint, five_node_mesh):
    ens = abc_sample(problem, 1_000, 20, 100, np.random.default_rng(8))
    np.testing.assert_array_equal(ens.fields, linear.decode_batch(ens.latents, problem.mesh))

    model = tiny_checkpoint.autoencoder()
    op = ObservationOperator((1, 3), sigma=0.05)
    nn_problem = InverseProblem(five_node_mesh, [op], [0.3, 0.4], model)
    ens = abc_sample(nn_problem, 500, 10, 64, np.random.default_rng(9))
    np.testing.assert_array_equal(ens.fields, model.decode_batch(ens.latents, five_node_mesh))
    assert ens.mode().values.shape == (5, 1)


def test_fixed_noise_prior_reproduces_known_sigma(mesh, linear, problem):
    prior = NoisePrior(fixed_eps=0.5)
    sigma = float(prior.transform(0.5))
    op = ObservationOperator(OBSERVED, sigma=sigma)
    known = InverseProblem(mesh, [op], problem.y, linear)
    joint = InverseProblem(mesh, [op], problem.y, linear, noise_mode="infer")
    a = abc_sample(known, 4_000, 40, 500, np.random.default_rng(10))
    b = abc_sample_joint_noise(joint, prior, 4_000, 40, 500, np.random.default_rng(10))
    np.testing.assert_array_equal(a.latents, b.latents)
    np.testing.assert_array_equal(a.residuals, b.residuals)
    assert np.all(b.sigmas == sigma) and a.sigmas is None


def test_noise_prior_transform():
    prior = NoisePrior()
    assert prior.median == pytest.approx(np.exp(-4.0) + 1e-3)
    draws = prior.draw(np.random.default_rng(0), 10_000)
    assert draws.min() > 1e-3
    assert np.median(draws) == pytest.approx(prior.median, rel=0.05)


@pytest.mark.slow
def test_joint_noise_recovers_the_noise_level(mesh):
    r = np.random.default_rng(11)
    decoder = LinearDecoder(0.1 * r.standard_normal((12, 2)), np.zeros(12))
    truth = decoder.decode_batch(r.standard_normal((1, 2)), mesh)[0]
    op = ObservationOperator(tuple(range(12)), sigma=0.05)
    y = op.select(truth) + 0.05 * r.standard_normal(12)
    joint = InverseProblem(mesh, [op], y, decoder, noise_mode="infer")
    ens = abc_sample_joint_noise(joint, NoisePrior(), 200_000, 500, 2_000, np.random.default_rng(12))
    assert 0.05 / 3 <= np.median(ens.sigmas) <= 0.05 * 3


def test_predicted_follows_the_operator_order(mesh):
    decoder = LinearDecoder(np.eye(24)[:, :5], np.arange(24.0), d_u=2)
    ops = [ObservationOperator((3, 1), channel=1, sigma=0.1), ObservationOperator((0,), channel=0, sigma=0.2)]
    problem = InverseProblem(mesh, ops, np.zeros(3), decoder)
    fields = decoder.decode_batch(np.zeros((1, 5)), mesh)
    np.testing.assert_array_equal(problem.predicted(fields)[0], [7.0, 3.0, 0.0])
    np.testing.assert_array_equal(problem.sigma_vector, [0.1, 0.1, 0.2])
    assert problem.potential(fields)[0] == pytest.approx(0.5 * (49 + 9) / 0.01)


def test_problem_validation(mesh, linear):
    op = ObservationOperator((1, 2), sigma=0.1)
    with pytest.raises(ShapeMismatchError):
        InverseProblem(mesh, [op], [1.0], linear)
    with pytest.raises(ObservationIndexError):
        InverseProblem(mesh, [ObservationOperator((12,), sigma=0.1)], [1.0], linear)
    with pytest.raises(ConfigError):
        InverseProblem(mesh, [op], [1.0, 2.0], linear, noise_mode="guess")
    with pytest.raises(ConfigError):
        InverseProblem(mesh, [op.with_sigma(0.0)], [1.0, 2.0], linear)
    # zero sigma is fine when sigma is inferred
    assert InverseProblem(mesh, op.with_sigma(0.0), [1.0, 2.0], linear, noise_mode="infer").n_obs == 2


def test_sampler_argument_errors(problem, mesh, linear):
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        abc_sample(problem, 10, 11, 5, rng)
    with pytest.raises(ConfigError):
        abc_sample_joint_noise(problem, NoisePrior(), 10, 5, 5, rng)
    with pytest.raises(ConfigError):
        pcn_sample(problem, 10, 0.0, 0, rng)
    with pytest.raises(ConfigError):
        pcn_sample(problem, 10, 0.2, 10, rng)
    joint = InverseProblem(mesh, problem.observations, problem.y, linear, noise_mode="infer")
    with pytest.raises(ConfigError):
        pcn_sample(joint, 10, 0.2, 0, rng)


def test_pcn_warns_on_low_acceptance(mesh, caplog):
    r = np.random.default_rng(12)
    decoder = LinearDecoder(10.0 * r.standard_normal((12, 4)), np.zeros(12))
    op = ObservationOperator(tuple(range(12)), sigma=1e-3)
    y = op.select(decoder.decode_batch(r.standard_normal((1, 4)), mesh)[0])
    ens = pcn_sample(InverseProblem(mesh, [op], y, decoder), 300, 1.0, 0, np.random.default_rng(13))
    assert ens.metadata["acceptance_rate"] < 0.01
    assert "acceptance rate" in caplog.text
    assert np.all(np.diff(ens.ranked().residuals) >= 0.0)


def test_posterior_stats(problem):
    ens = abc_sample(problem, 2_000, 100, 500, np.random.default_rng(14))
    stats = posterior_stats(ens)
    np.testing.assert_allclose(stats.mean.values, ens.fields.mean(axis=0))
    np.testing.assert_allclose(stats.std.values, ens.fields.std(axis=0, ddof=1))
    assert set(stats.quantiles) == {0.05, 0.5, 0.95}
    assert np.all(stats.quantiles[0.05] <= stats.quantiles[0.95])
    single = abc_sample(problem, 100, 1, 50, np.random.default_rng(14))
    with pytest.raises(DegenerateBatchError):
        posterior_stats(single)


def test_ensemble_files(problem, tmp_path):
    ens = abc_sample_joint_noise(
        InverseProblem(problem.mesh, problem.observations, problem.y, problem.decoder, noise_mode="infer"),
        NoisePrior(), 1_000, 8, 200, np.random.default_rng(15))
    write_ensemble(ens, problem.mesh, tmp_path / "posterior")
    back, mesh = read_ensemble(tmp_path / "posterior")
    np.testing.assert_array_equal(back.fields, ens.fields)
    np.testing.assert_array_equal(back.sigmas, ens.sigmas)
    np.testing.assert_array_equal(back.latents, ens.latents)
    assert back.metadata["method"] == "abc" and mesh.n_nodes == 12

    write_query_samples(ens, [0, 11], tmp_path / "q.csv")
    rows = list(csv.reader((tmp_path / "q.csv").open()))
    assert rows[0] == ["sample", "node_0", "node_11"]
    assert len(rows) == 9 and float(rows[1][2]) == ens.fields[0, 11, 0]
    with pytest.raises(ObservationIndexError):
        write_query_samples(ens, [12], tmp_path / "bad.csv")
