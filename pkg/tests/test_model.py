from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

import fem
import noise
from errors import ConfigurationError, ModelError, ShapeError
from model import (BoxProjection, PointwiseMap, apply_nemytskii, build_model, constant, gaussian_sensors,
                   heat_benchmark, observation_gradient, observe, running_cost, sample_initial,
                   terminal_cost, verify_derivatives)


class TestNemytskii:
    def test_pointwise_application(self, ops, benchmark, rng):
        x = rng.standard_normal(ops.n_dof)
        u = rng.standard_normal(ops.n_dof)
        assert_allclose(apply_nemytskii(benchmark.ell.value, x, u), 0.5 * (x ** 2 + u ** 2))
        assert_allclose(apply_nemytskii(benchmark.b.du, x, u), np.ones(ops.n_dof))

    def test_mismatched_control(self, ops, benchmark):
        with pytest.raises(ShapeError):
            apply_nemytskii(benchmark.ell.value, np.zeros(ops.n_dof), np.zeros(3))


class TestObservation:
    def test_zero_state_gives_zero_observation(self, ops, benchmark):
        zero = np.zeros(ops.n_dof)
        assert_allclose(observe(benchmark, zero, zero, ops), np.zeros(3))

    def test_arctan_sensors_are_bounded(self, ops, benchmark, rng):
        x = 100 * rng.standard_normal((20, ops.n_dof))
        values = observe(benchmark, x, np.zeros(ops.n_dof), ops)
        assert values.shape == (20, 3)
        assert np.all(np.abs(values) <= benchmark.h.bound)

    def test_sensors_have_unit_norm(self, ops):
        sensors = gaussian_sensors(ops, 4, 0.5)
        assert_allclose(fem.l2_norm(sensors, ops), np.ones(4))

    def test_representer_gives_directional_derivative(self, ops, benchmark, rng):
        x = 0.2 * rng.standard_normal(ops.n_dof)
        u = 0.2 * rng.standard_normal(ops.n_dof)
        v = rng.standard_normal(ops.n_dof)
        h_x, h_u = observation_gradient(benchmark, x, u, ops)
        eps = 1e-6
        numeric = (observe(benchmark, x + eps * v, u, ops) - observe(benchmark, x - eps * v, u, ops)) / (2 * eps)
        assert_allclose(fem.inner_product(h_x, v, ops), numeric, rtol=1e-6, atol=1e-9)
        assert_allclose(h_u, h_x)

    def test_linear_sensors_ignore_control(self, ops, linear_model, rng):
        x = rng.standard_normal(ops.n_dof)
        h_x, h_u = observation_gradient(linear_model, x, rng.standard_normal(ops.n_dof), ops)
        assert_allclose(h_u, 0.0)
        assert_allclose(h_x, linear_model.h.sensors)


class TestCosts:
    def test_zero_state_and_control_cost_nothing(self, ops, benchmark):
        zero = np.zeros(ops.n_dof)
        assert running_cost(benchmark, zero, zero, ops) == 0.0
        assert terminal_cost(benchmark, zero, ops) == 0.0

    def test_constant_state_cost_is_quadrature(self, ops, benchmark):
        ones = np.ones(ops.n_dof)
        assert_allclose(running_cost(benchmark, ones, np.zeros(ops.n_dof), ops), 0.5 * ops.weights.sum())
        assert_allclose(terminal_cost(benchmark, 2 * ones, ops), 2.0 * ops.weights.sum())

    def test_batched_costs(self, ops, benchmark, rng):
        x = rng.standard_normal((3, ops.n_dof))
        u = rng.standard_normal(ops.n_dof)
        assert_allclose(running_cost(benchmark, x, u, ops), [running_cost(benchmark, row, u, ops) for row in x])


class TestDerivativeCheck:
    def test_presets_pass(self, ops, benchmark, linear_model):
        verify_derivatives(benchmark, ops)
        verify_derivatives(linear_model, ops)

    def test_wrong_drift_derivative_rejected(self, ops, benchmark):
        broken = replace(benchmark, b=PointwiseMap(value=lambda x, u: u + x, dx=constant(0.0), du=constant(1.0)))
        with pytest.raises(ModelError, match="b_x"):
            verify_derivatives(broken, ops)

    def test_wrong_terminal_derivative_rejected(self, ops, benchmark):
        broken = replace(benchmark, m=PointwiseMap(value=lambda x, u=None: x ** 2, dx=lambda x, u=None: x))
        with pytest.raises(ModelError, match="m_x"):
            verify_derivatives(broken, ops)


class TestPresets:
    def test_benchmark_coefficients(self, ops, benchmark, rng):
        x = rng.standard_normal(ops.n_dof)
        assert benchmark.shared_sigma
        assert benchmark.sigma_is_additive
        assert_allclose(benchmark.g[0].value(x, None), 0.03 * (x + 1))
        assert_allclose(benchmark.initial_state, np.sin(np.pi * ops.mesh.interior_coords / 10.0))
        assert_allclose(benchmark.g_directions, noise.sine_modes(ops, 3))

    def test_too_many_modes(self, ops):
        with pytest.raises(ConfigurationError, match="n_noise_modes"):
            heat_benchmark(ops, n_noise_modes=ops.n_dof + 1)

    def test_build_model_from_config(self, tiny_config):
        config = tiny_config()
        ops = fem.assemble(config.length, config.n_elems, config.dt)
        model = build_model(config, ops)
        assert model.name == "heat_benchmark"
        assert model.obs_dim == config.obs_dim
        assert model.n_noise_modes == config.n_noise_modes

    def test_unknown_model(self, tiny_config):
        config = replace(tiny_config(), model="wave")
        ops = fem.assemble(config.length, config.n_elems, config.dt)
        with pytest.raises(ConfigurationError, match="model"):
            build_model(config, ops)


class TestAdmissibleSet:
    def test_box_projection_is_idempotent(self, rng):
        project = BoxProjection(-0.5, 0.5)
        u = rng.standard_normal(50)
        once = project(u)
        assert np.all(np.abs(once) <= 0.5)
        assert_allclose(project(once), once)

    def test_box_bounds_validated(self, ops):
        with pytest.raises(ConfigurationError):
            heat_benchmark(ops, control_lower=1.0, control_upper=0.0)

    def test_unbounded_is_identity(self, ops, benchmark, rng):
        u = rng.standard_normal(ops.n_dof)
        assert_allclose(benchmark.project_U(u), u)


class TestInitialLaw:
    def test_deterministic_initial_state(self, benchmark):
        states = sample_initial(benchmark, np.random.default_rng(0), 5)
        assert_allclose(states, np.tile(benchmark.initial_state, (5, 1)))

    def test_perturbed_initial_mean(self, ops, linear_model):
        count = 2000
        states = sample_initial(linear_model, np.random.default_rng(0), count)
        first = fem.inner_product(states - linear_model.initial_state, linear_model.noise_modes[0], ops)
        # first mode has standard deviation initial_spread
        assert abs(first.mean()) < 3 * linear_model.initial_spread / np.sqrt(count)
