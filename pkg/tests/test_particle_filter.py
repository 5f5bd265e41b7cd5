from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import fem
import noise
from errors import BlowUpError, ConfigurationError, ModelError
from forward import step_truth
from model import linear_gaussian_test, observe, sample_initial
from particle_filter import (ParticleCloud, branch, branching_offspring, effective_sample_size, init_cloud,
                             kalman_reference, multinomial_offspring, normalize, particle_increments,
                             posterior_expectation, posterior_mean, propagate_and_weight, select_particle)
from statistics_utils import (chi_square_test, interpret_chi_square_result, loglog_slope, offspring_moments,
                              within_standard_errors)


def _cloud_from_weights(raw, n_dof=3):
    raw = np.asarray(raw, dtype=float)
    positions = np.arange(len(raw) * n_dof, dtype=float).reshape(len(raw), n_dof)
    return normalize(ParticleCloud(positions=positions, log_weights=np.log(raw),
                                   normalized_weights=np.full(len(raw), 1.0 / len(raw))))


class TestInitCloud:
    def test_deterministic_initial_law(self, ops, benchmark):
        cloud = init_cloud(7, lambda rng, count: sample_initial(benchmark, rng, count), seed=0)
        assert cloud.size == 7
        assert_allclose(cloud.positions, np.tile(benchmark.initial_state, (7, 1)))
        assert_allclose(cloud.raw_weights, 1.0)
        assert_allclose(cloud.normalized_weights, 1.0 / 7)

    def test_single_particle(self, benchmark):
        cloud = init_cloud(1, lambda rng, count: sample_initial(benchmark, rng, count), seed=0)
        assert_allclose(cloud.normalized_weights, [1.0])

    def test_empty_cloud_rejected(self, benchmark):
        with pytest.raises(ConfigurationError, match="n_particles"):
            init_cloud(0, lambda rng, count: sample_initial(benchmark, rng, count), seed=0)

    def test_perturbed_initial_mean(self, ops, linear_model):
        count = 1000
        cloud = init_cloud(count, lambda rng, c: sample_initial(linear_model, rng, c), seed=3)
        first = fem.inner_product(posterior_mean(cloud) - linear_model.initial_state,
                                  linear_model.noise_modes[0], ops)
        assert abs(first) < 3 * linear_model.initial_spread / np.sqrt(count)


class TestNormalize:
    def test_equal_weights(self):
        assert_allclose(_cloud_from_weights([3.0, 3.0, 3.0, 3.0]).normalized_weights, 0.25)

    def test_ratio_weights(self):
        assert_allclose(_cloud_from_weights([2.0, 1.0, 1.0]).normalized_weights, [0.5, 0.25, 0.25])

    def test_random_weights_sum_to_one(self, rng):
        cloud = _cloud_from_weights(rng.uniform(0.01, 10.0, size=50))
        assert abs(cloud.normalized_weights.sum() - 1.0) < 1e-12

    def test_tiny_log_weights_do_not_underflow(self):
        cloud = _cloud_from_weights([1.0, 1.0])
        cloud = normalize(replace(cloud, log_weights=np.array([-2000.0, -2001.0])))
        assert_allclose(cloud.normalized_weights, [1 / (1 + np.exp(-1.0)), 1 / (1 + np.exp(1.0))])


class TestBranching:
    def test_uniform_weights_branch_to_identity(self, rng):
        cloud = _cloud_from_weights(np.ones(9))
        branched = branch(cloud, rng, step=5)
        assert_array_equal(branched.positions, cloud.positions)
        assert branched.interval_start == 5

    def test_population_is_conserved(self, rng):
        for _ in range(200):
            cloud = _cloud_from_weights(rng.exponential(size=12))
            branched = branch(cloud, rng)
            assert branched.size == 12
            assert_allclose(branched.normalized_weights, 1.0 / 12)
            assert effective_sample_size(branched.normalized_weights) == pytest.approx(12)

    def test_offspring_inherit_positions_in_order(self, rng):
        cloud = _cloud_from_weights([6.0, 1.0, 1.0])
        branched = branch(cloud, rng)
        parents = [int(row[0]) // 3 for row in branched.positions]
        assert parents == sorted(parents)
        # S * w_0 = 2.25
        assert parents.count(0) in (2, 3)

    def test_two_point_marginal(self, rng):
        # S * w_0 = 2.3
        size = 10
        weights = np.full(size, 0.77 / 9)
        weights[0] = 0.23
        trials = 20000
        counts = np.array([branching_offspring(weights, size, rng)[0] for _ in range(trials)])
        assert set(np.unique(counts)) <= {2, 3}
        p_three = np.mean(counts == 3)
        assert abs(p_three - 0.3) < 3 * np.sqrt(0.3 * 0.7 / trials)
        _, p_value = chi_square_test([np.sum(counts == 2), np.sum(counts == 3)], [0.7, 0.3])
        assert interpret_chi_square_result(p_value, alpha=0.001)["consistent"]

    def test_offspring_means_match_weights(self, rng):
        weights = np.array([0.5, 0.3, 0.1, 0.1])
        samples = np.array([branching_offspring(weights, 4, rng) for _ in range(20000)])
        assert np.all(samples.sum(axis=1) == 4)
        moments = offspring_moments(samples)
        assert within_standard_errors(moments["mean"], 4 * weights, moments["stderr"])

    def test_fixed_weights_variance(self, rng):
        weights = np.array([0.5, 0.3, 0.1, 0.1])
        samples = np.array([branching_offspring(weights, 4, rng) for _ in range(20000)])
        fractions = np.array([0.0, 0.2, 0.4, 0.4])
        assert_allclose(np.var(samples, axis=0), fractions * (1 - fractions), atol=0.01)

    def test_variance_below_multinomial(self):
        rng = np.random.default_rng(11)
        size = 8
        trials = 4000
        for _ in range(20):
            weights = rng.dirichlet(5 * np.ones(size))
            branching = np.array([branching_offspring(weights, size, rng) for _ in range(trials)])
            multinomial = np.array([multinomial_offspring(weights, size, rng) for _ in range(trials)])
            assert np.var(branching, axis=0).sum() < 0.9 * np.var(multinomial, axis=0).sum()

    def test_multinomial_baseline_conserves_population(self, rng):
        assert multinomial_offspring([0.2, 0.3, 0.5], 10, rng).sum() == 10


class TestPropagation:
    def test_increments_keyed_per_particle(self):
        small = particle_increments(4, 3, 3, 6, 0.01)
        large = particle_increments(4, 3, 8, 6, 0.01)
        assert large.shape == (8, 6)
        assert_array_equal(large[:3], small)
        assert not np.allclose(large[3], large[4])

    def test_unobserved_weights_unchanged(self, ops, benchmark, rng):
        model = replace(benchmark, h=replace(benchmark.h, gain=0.0))
        cloud = init_cloud(5, lambda r, c: sample_initial(model, r, c), seed=0)
        dW = particle_increments(0, 0, 5, model.n_noise_modes, ops.dt)
        moved = propagate_and_weight(cloud, np.zeros(ops.n_dof), 0.1 * np.ones(3), dW, model, ops)
        assert_allclose(moved.log_weights, 0.0)
        expected = step_truth(cloud.positions, np.zeros(ops.n_dof), dW, 0.1 * np.ones((5, 3)), model, ops)
        assert_allclose(moved.positions, expected, atol=1e-14)

    def test_self_consistent_reinforcement(self, ops, noise_free):
        model = replace(noise_free, h=replace(noise_free.h, gain=1.0))
        cloud = init_cloud(1, lambda r, c: sample_initial(model, r, c), seed=0)
        u = np.zeros(ops.n_dof)
        h = observe(model, cloud.positions[0], u, ops)
        moved = propagate_and_weight(cloud, u, h * ops.dt, np.zeros((1, model.n_noise_modes)), model, ops)
        assert_allclose(moved.log_weights, [0.5 * ops.dt * h @ h])
        assert moved.raw_weights[0] > 1.0

    def test_unweighted_reference_only_moves(self, ops, benchmark):
        cloud = init_cloud(4, lambda r, c: sample_initial(benchmark, r, c), seed=0)
        dW = particle_increments(0, 0, 4, benchmark.n_noise_modes, ops.dt)
        moved = propagate_and_weight(cloud, np.zeros(ops.n_dof), 0.05 * np.ones(3), dW, benchmark, ops,
                                     weighted=False)
        assert_allclose(moved.log_weights, 0.0)
        assert not np.allclose(moved.positions, cloud.positions)

    def test_blow_up_names_particle(self, ops, benchmark):
        cloud = init_cloud(3, lambda r, c: sample_initial(benchmark, r, c), seed=0)
        positions = cloud.positions.copy()
        positions[1, 2] = np.nan
        with pytest.raises(BlowUpError) as info:
            propagate_and_weight(replace(cloud, positions=positions), np.zeros(ops.n_dof), np.zeros(3),
                                 np.zeros((3, benchmark.n_noise_modes)), benchmark, ops, step=4)
        assert info.value.particle == 1
        assert info.value.step == 5


class TestPosterior:
    def test_constant_functional(self):
        cloud = _cloud_from_weights([1.0, 2.0, 3.0])
        assert posterior_expectation(cloud, lambda x: 1.0) == pytest.approx(1.0, abs=1e-15)

    def test_equal_weights_give_arithmetic_mean(self):
        cloud = _cloud_from_weights(np.ones(4))
        assert_allclose(posterior_expectation(cloud, lambda x: x.sum()), np.mean(cloud.positions.sum(axis=1)))
        assert_allclose(posterior_mean(cloud), cloud.positions.mean(axis=0))

    def test_selection_modes(self):
        cloud = _cloud_from_weights([0.0 + 1e-300, 1.0])
        picks = [select_particle(cloud, noise.generator(0, noise.SELECTION, i)) for i in range(20)]
        assert set(picks) == {1}
        with pytest.raises(ConfigurationError, match="particle_select"):
            select_particle(cloud, noise.generator(0), "greedy")


def _filter_error(ops, model, n_particles, seed, n_steps=20, branch_every=5):
    """L2 distance between the cloud mean and the Kalman mean at the final step"""
    truth_noise = noise.sample_path(seed, noise.TRUTH, n_steps, model.n_noise_modes, model.obs_dim, ops.dt)
    x = sample_initial(model, noise.generator(seed, noise.TRUTH, 2), 1)[0]
    controls = np.zeros((n_steps + 1, ops.n_dof))
    cloud = init_cloud(n_particles, lambda r, c: sample_initial(model, r, c), seed)
    dY = np.empty((n_steps, model.obs_dim))
    for k in range(n_steps):
        dY[k] = observe(model, x, controls[k], ops) * ops.dt + truth_noise.dB[k]
        x = step_truth(x, controls[k], truth_noise.dW[k], truth_noise.dB[k], model, ops, step=k)
        dW = particle_increments(seed, k, n_particles, model.n_noise_modes, ops.dt)
        cloud = propagate_and_weight(cloud, controls[k], dY[k], dW, model, ops, step=k)
        if (k + 1) % branch_every == 0:
            cloud = branch(cloud, noise.generator(seed, noise.BRANCHING, k + 1), step=k + 1)
    kalman = kalman_reference(model, ops, controls, dY)
    return fem.l2_norm(posterior_mean(cloud) - kalman.means[-1], ops), kalman


class TestKalmanReference:
    @pytest.fixture
    def small_linear(self):
        ops = fem.assemble(10.0, 20, 0.01)
        return ops, linear_gaussian_test(ops, obs_dim=3, n_noise_modes=8, initial_spread=0.3, obs_gain=5.0)

    def test_requires_linear_model(self, ops, benchmark):
        with pytest.raises(ModelError):
            kalman_reference(benchmark, ops, np.zeros((2, ops.n_dof)), np.zeros((1, 3)))

    def test_no_observation_gain_gives_prior_mean(self, ops, linear_model):
        model = replace(linear_model, h=replace(linear_model.h, gain=0.0))
        controls = np.zeros((6, ops.n_dof))
        result = kalman_reference(model, ops, controls, np.ones((5, 3)))
        expected = model.initial_state
        for _ in range(5):
            expected = fem.implicit_step(expected, ops)
        assert_allclose(result.means[-1], expected, atol=1e-12)

    def test_cloud_tracks_kalman_mean(self, small_linear):
        ops, model = small_linear
        error, kalman = _filter_error(ops, model, 2000, seed=1)
        posterior_std = np.sqrt(np.trace(kalman.covariance @ ops.mass.toarray()))
        assert error < 5 * posterior_std / np.sqrt(2000) + 1e-3

    @pytest.mark.slow
    def test_error_decays_like_inverse_square_root(self, small_linear):
        ops, model = small_linear
        sizes = [50, 200, 800]
        rmse = []
        for size in sizes:
            errors = [_filter_error(ops, model, size, seed)[0] for seed in range(50)]
            rmse.append(np.sqrt(np.mean(np.square(errors))))
        assert abs(loglog_slope(sizes, rmse) + 0.5) <= 0.15
