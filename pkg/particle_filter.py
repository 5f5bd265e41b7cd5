"""
Branching particle approximation of the conditional law of the state
given the observations.

Weights are carried as log-weights between branching events; branching
replaces the weights by random offspring counts with mean S * normalized
weight while keeping the population at exactly S.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg
from scipy.special import logsumexp

import fem
import noise
from errors import ConfigurationError, FieldError, ModelError, ShapeError
from forward import step_particle
from model import ModelSpec, initial_covariance, observe

logger = logging.getLogger(__name__)

# S * weight this close to an integer branches deterministically
INTEGER_SNAP = 1e-9


@dataclass(frozen=True)
class ParticleCloud:
    """S particles with log raw weights and the matching normalized weights"""

    positions: NDArray[np.float64]
    log_weights: NDArray[np.float64]
    normalized_weights: NDArray[np.float64]
    interval_start: int = 0

    @property
    def size(self) -> int:
        return self.positions.shape[0]

    @property
    def raw_weights(self) -> NDArray[np.float64]:
        return np.exp(self.log_weights)


def init_cloud(n_particles: int, initial_sampler: Callable[[np.random.Generator, int], NDArray],
               seed: int) -> ParticleCloud:
    """S draws from the initial law, raw weights 1, normalized weights 1/S"""
    if int(n_particles) != n_particles or n_particles < 1:
        raise ConfigurationError(f"need at least one particle, got {n_particles}", key="n_particles")
    positions = np.asarray(initial_sampler(noise.generator(seed, noise.INITIAL), n_particles), dtype=np.float64)
    if positions.shape[0] != n_particles:
        raise ShapeError(f"initial sampler returned {positions.shape[0]} states, expected {n_particles}")
    return ParticleCloud(positions=positions, log_weights=np.zeros(n_particles),
                         normalized_weights=np.full(n_particles, 1.0 / n_particles))


def particle_increments(seed: int, step: int, n_particles: int, n_modes: int, dt: float) -> NDArray[np.float64]:
    """
    W-increments for every particle at one step.

    Particle i draws from its own (PARTICLES, step, i) substream, so its
    increments do not depend on the cloud size.
    """
    draws = [noise.generator(seed, noise.PARTICLES, step, i).standard_normal(n_modes) for i in range(n_particles)]
    return np.array(draws).reshape(n_particles, n_modes) * np.sqrt(dt)


def normalize(cloud: ParticleCloud) -> ParticleCloud:
    """Normalized weights M / sum(M), computed in log space"""
    if not np.any(np.isfinite(cloud.log_weights)):
        raise FieldError("every particle weight vanished")
    if np.any(np.isnan(cloud.log_weights)) or np.any(np.isposinf(cloud.log_weights)):
        raise FieldError("particle weights are not finite")
    if np.all(cloud.log_weights == cloud.log_weights[0]):
        return replace(cloud, normalized_weights=np.full(cloud.size, 1.0 / cloud.size))
    normalized = np.exp(cloud.log_weights - logsumexp(cloud.log_weights))
    return replace(cloud, normalized_weights=normalized / normalized.sum())


def propagate_and_weight(cloud: ParticleCloud, u: ArrayLike, dY: ArrayLike, dW: ArrayLike,
                         model: ModelSpec, ops: fem.FemOperators, step: int = 0,
                         weighted: bool = True) -> ParticleCloud:
    """
    Advance every particle with step_particle and multiply its raw weight by
    exp(h . dY - |h|^2 dt / 2), h evaluated at the left endpoint.

    With weighted=False the particles move but the weights are left alone
    (the fully observed reference run).
    """
    dY = np.asarray(dY, dtype=np.float64)
    positions = step_particle(cloud.positions, u, dW, dY, model, ops, step=step)
    log_weights = cloud.log_weights
    if weighted:
        h = observe(model, cloud.positions, u, ops)
        log_weights = log_weights + h @ dY - 0.5 * ops.dt * np.sum(h * h, axis=-1)
    return normalize(replace(cloud, positions=positions, log_weights=log_weights))


def branching_offspring(weights: ArrayLike, n_offspring: int, rng: np.random.Generator) -> NDArray[np.int64]:
    """
    Offspring counts o with sum(o) = n_offspring and o_i in {floor(S w_i), floor(S w_i) + 1},
    P(o_i = floor + 1) equal to the fractional part of S w_i.

    The remainder is distributed by systematic sampling on the fractional parts.
    """
    expected = n_offspring * np.asarray(weights, dtype=np.float64)
    nearest = np.round(expected)
    expected = np.where(np.abs(expected - nearest) <= INTEGER_SNAP, nearest, expected)
    base = np.floor(expected)
    fractions = expected - base
    offspring = base.astype(np.int64)

    remainder = n_offspring - int(offspring.sum())
    if remainder > 0:
        edges = np.minimum(np.cumsum(fractions), remainder)
        edges[-1] = remainder
        points = rng.uniform() + np.arange(remainder)
        owners = np.minimum(np.searchsorted(edges, points, side="right"), len(edges) - 1)
        offspring += np.bincount(owners, minlength=len(edges))
    return offspring


def multinomial_offspring(weights: ArrayLike, n_offspring: int, rng: np.random.Generator) -> NDArray[np.int64]:
    """Multinomial resampling counts on the same weights; a variance baseline"""
    return rng.multinomial(n_offspring, np.asarray(weights, dtype=np.float64))


def branch(cloud: ParticleCloud, rng: np.random.Generator, step: Optional[int] = None) -> ParticleCloud:
    """Replace each particle by its offspring (which inherit its position); weights reset to 1/S"""
    size = cloud.size
    offspring = branching_offspring(cloud.normalized_weights, size, rng)
    if offspring.sum() != size:
        raise FieldError(f"branching produced {offspring.sum()} particles, expected {size}")
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug("branching at step %s: %d parents survive, max offspring %d",
                     step, np.count_nonzero(offspring), offspring.max())
    return ParticleCloud(
        positions=np.repeat(cloud.positions, offspring, axis=0),
        log_weights=np.zeros(size),
        normalized_weights=np.full(size, 1.0 / size),
        interval_start=cloud.interval_start if step is None else step,
    )


def effective_sample_size(weights: ArrayLike) -> float:
    """(sum of squared normalized weights)^-1"""
    w = np.asarray(weights, dtype=np.float64)
    return float(1.0 / np.sum(w * w))


def posterior_expectation(cloud: ParticleCloud, phi: Callable[[NDArray], ArrayLike]):
    """sum_i normalized_weight_i * phi(x_i)"""
    values = np.array([phi(x) for x in cloud.positions], dtype=np.float64)
    result = np.tensordot(cloud.normalized_weights, values, axes=1)
    return float(result) if np.ndim(result) == 0 else result


def posterior_mean(cloud: ParticleCloud) -> NDArray[np.float64]:
    return cloud.normalized_weights @ cloud.positions


def select_particle(cloud: ParticleCloud, rng: np.random.Generator, mode: str = "weighted") -> int:
    """Index of the particle an SGD rollout starts from"""
    if mode == "weighted":
        return int(rng.choice(cloud.size, p=cloud.normalized_weights))
    if mode == "uniform":
        return int(rng.integers(cloud.size))
    raise ConfigurationError(f"unknown selection {mode!r}", key="particle_select")


def diagnostics(cloud: ParticleCloud, model: ModelSpec, ops: fem.FemOperators) -> Dict[str, float]:
    """ESS, weight range and a few posterior functionals for the filter trace"""
    w = cloud.normalized_weights
    first_mode = fem.inner_product(cloud.positions, model.noise_modes[0], ops)
    norms = fem.l2_norm(cloud.positions, ops)
    return {
        "ess": effective_sample_size(w),
        "min_weight": float(w.min()),
        "max_weight": float(w.max()),
        "mean_norm": float(w @ norms),
        "mean_first_mode": float(w @ first_mode),
    }


@dataclass(frozen=True)
class KalmanResult:
    means: NDArray[np.float64]
    covariance: NDArray[np.float64]


def kalman_reference(model: ModelSpec, ops: fem.FemOperators, controls: ArrayLike,
                     dY: ArrayLike) -> KalmanResult:
    """
    Exact discrete Kalman filter for the linear-Gaussian model on the FEM
    space, with the observation at the left endpoint of each step: the
    mean at node k+1 is conditioned on dY_0 .. dY_k, matching the weighted cloud.

    Returns:
        KalmanResult with the filtered means on every node and the final covariance
    """
    if model.h.link != "linear" or model.h.control_coupled:
        raise ModelError(f"{model.name}: Kalman reference needs linear sensors on the state")
    if not model.sigma_is_additive or not all(g.constant_in_x for g in model.g):
        raise ModelError(f"{model.name}: Kalman reference needs additive sigma and zero g")
    zero = np.zeros(ops.n_dof)
    if any(np.any(g.value(zero, None) != 0) for g in model.g):
        raise ModelError(f"{model.name}: Kalman reference needs g = 0")

    controls = ops.check(controls)
    dY = np.asarray(dY, dtype=np.float64)
    dt = ops.dt
    n_steps = dY.shape[0]

    # (M + dt A)^-1 M; both factors are symmetric so solving the rows of M gives its transpose
    transition = fem.solve_implicit(ops.mass.toarray(), ops).T
    amplitude = float(model.sigma[0].value(zero, None)[0])
    modes = model.noise_modes
    process = transition @ (amplitude ** 2 * dt * modes.T @ modes) @ transition.T
    H = model.h.gain * model.h.sensor_duals
    identity = np.eye(model.obs_dim)

    mean = model.initial_state.copy()
    cov = initial_covariance(model)
    means = np.empty((n_steps + 1, ops.n_dof))
    means[0] = mean
    for k in range(n_steps):
        innovation_cov = dt * dt * H @ cov @ H.T + dt * identity
        gain = linalg.solve(innovation_cov, dt * H @ cov, assume_a="pos").T
        mean = mean + gain @ (dY[k] - dt * H @ mean)
        cov = cov - gain @ (dt * H @ cov)
        mean = transition @ (mean + dt * controls[k])
        cov = transition @ cov @ transition.T + process
        means[k + 1] = mean
    return KalmanResult(means=means, covariance=0.5 * (cov + cov.T))
