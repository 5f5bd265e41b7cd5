"""
Conditional stochastic gradient descent over the receding time grid.

At every outer time t_n the control schedule on [t_n, T] is optimized by
single-realization forward/backward solves started from particles of
the filter cloud; the first entry of the optimized schedule is applied
to the truth, the truth emits an observation, and the cloud is moved,
weighted and branched.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import softmax

import fem
import noise
from adjoint import hamiltonian_gradient_u, pathwise_z2, solve_adjoint
from errors import ConfigurationError, ShapeError, SolverError
from forward import (ObservationPath, StatePath, observation_increment, simulate_particle_path, simulate_truth,
                     step_truth)
from model import ModelSpec, build_model, running_cost, sample_initial, terminal_cost
from particle_filter import (ParticleCloud, branch, diagnostics, init_cloud, particle_increments,
                             propagate_and_weight, select_particle)

logger = logging.getLogger(__name__)

# samples per batched forward solve in estimate_cost; fixed so results do not depend on threads
COST_CHUNK = 64


@dataclass(frozen=True)
class ControlSchedule:
    """u on the time nodes start..N_T as seen from t_start"""

    start: int
    controls: NDArray[np.float64]
    iteration: int = 0
    learning_rate: float = 0.0

    @property
    def length(self) -> int:
        return self.controls.shape[0]

    @property
    def current(self) -> NDArray[np.float64]:
        return self.controls[0]


@dataclass
class RunReport:
    config: Dict[str, Any]
    seed: int
    controls: NDArray[np.float64]
    truth: Optional[StatePath]
    observations: Optional[ObservationPath]
    uncontrolled: Optional[StatePath] = None
    cost_trace: List[Dict[str, float]] = field(default_factory=list)
    sgd_trace: List[Dict[str, float]] = field(default_factory=list)
    filter_trace: List[Dict[str, float]] = field(default_factory=list)
    realized_cost: float = float("nan")
    committed_cost: Tuple[float, float] = (float("nan"), float("nan"))
    baseline_cost: Tuple[float, float] = (float("nan"), float("nan"))
    timings: Dict[str, float] = field(default_factory=dict)


def zero_schedule(start: int, n_steps: int, ops: fem.FemOperators, learning_rate: float = 0.0) -> ControlSchedule:
    return ControlSchedule(start, np.zeros((n_steps - start + 1, ops.n_dof)), 0, learning_rate)


def schedule_pairing(a: ArrayLike, b: ArrayLike, ops: fem.FemOperators) -> float:
    """sum over k < last of dt * quadrature(a_k b_k); the last node carries no weight"""
    a = ops.check(a)
    b = ops.check(b)
    return float(ops.dt * np.sum(fem.quadrature_pairing(a[:-1], b[:-1], ops)))


def gradient_field(model: ModelSpec, x: ArrayLike, u: ArrayLike, p: ArrayLike, z2: ArrayLike,
                   ops: fem.FemOperators) -> NDArray[np.float64]:
    """psi = b_u p + ell_u + sum_j (z2^j - <g^j, p>_w) h_u^j (as a field)"""
    return hamiltonian_gradient_u(model, x, u, p, z2, ops)


def sgd_step(schedule: ControlSchedule, gradients: ArrayLike, model: ModelSpec,
             learning_rate: Optional[float] = None) -> ControlSchedule:
    """u_k <- project_U(u_k - alpha psi_k) for every node of the schedule"""
    gradients = np.asarray(gradients, dtype=np.float64)
    if gradients.shape != schedule.controls.shape:
        raise ShapeError(f"gradient shape {gradients.shape} does not match schedule {schedule.controls.shape}")
    alpha = schedule.learning_rate if learning_rate is None else learning_rate
    updated = model.project_U(schedule.controls - alpha * gradients)
    return replace(schedule, controls=updated, iteration=schedule.iteration + 1)


def step_size(base: float, iteration: int, lr_schedule: str = "constant") -> float:
    if lr_schedule == "constant":
        return base
    if lr_schedule == "inverse":
        return base / (iteration + 1)
    raise ConfigurationError(f"unknown schedule {lr_schedule!r}", key="lr_schedule")


def rollout_cost(model: ModelSpec, ops: fem.FemOperators, x_start: ArrayLike, controls: ArrayLike,
                 dW: ArrayLike, dB: ArrayLike, start: int = 0):
    """Sampled cost sum_k dt L(x_k, u_k) + integral m(x_N) along one (or a batch of) truth paths"""
    path = simulate_truth(x_start, controls, dW, dB, model, ops, start=start)
    return path_cost(path, model, ops)


def path_cost(path: StatePath, model: ModelSpec, ops: fem.FemOperators):
    n = path.n_steps
    running = running_cost(model, path.states[:n], path.controls[:n, None] if path.states.ndim == 3
                           else path.controls[:n], ops)
    return ops.dt * np.sum(running, axis=0) + terminal_cost(model, path.states[n], ops)


class Rollout(NamedTuple):
    """One forward/backward pass: sampled cost, psi on every schedule node,
    log-likelihood of the simulated observations (0 for truth-measure
    rollouts) and the cost-to-go z on every node"""

    cost: float
    psi: NDArray[np.float64]
    log_likelihood: float
    cost_to_go: NDArray[np.float64]


def rollout_gradient(model: ModelSpec, ops: fem.FemOperators, x_start: ArrayLike, controls: ArrayLike,
                     dW: ArrayLike, dB: ArrayLike, start: int = 0, hxp_mode: str = "transposed",
                     observation_driven: bool = False, z2_estimator: str = "pathwise",
                     baseline: Optional[ArrayLike] = None) -> Rollout:
    """
    One forward/backward pass from x_start under the schedule.

    With observation_driven the drivers dB are read as observation
    increments dY, the path follows the particle dynamics and the
    backward solvers see the innovations.

    Args:
        baseline: cost-to-go c on the schedule nodes for the "baseline"
            z2 estimator; must not depend on dW, dB
    """
    controls = ops.check(controls)
    if observation_driven:
        path = simulate_particle_path(x_start, controls, dW, dB, model, ops, start=start)
        h = (np.asarray(dB) - path.dB) / ops.dt
        log_likelihood = float(np.sum(h * np.asarray(dB)) - 0.5 * ops.dt * np.sum(h * h))
    else:
        path = simulate_truth(x_start, controls, dW, dB, model, ops, start=start)
        log_likelihood = 0.0
    adjoint = solve_adjoint(path, model, ops, hxp_mode, z2_estimator=z2_estimator, baseline=baseline)

    n = path.n_steps
    psi = np.empty_like(controls[:n + 1])
    psi[:n] = gradient_field(model, path.states[:n], controls[:n], adjoint.p_bar, adjoint.z2, ops)
    # no observation is taken at T, so the terminal node sees psi = b_u p + ell_u only
    terminal_z2 = pathwise_z2(model, path.states[n], adjoint.p[n], ops)
    psi[n] = gradient_field(model, path.states[n], controls[n], adjoint.p[n], terminal_z2, ops)
    return Rollout(float(adjoint.z[0]), psi, log_likelihood, adjoint.z)


def inner_sgd(model: ModelSpec, ops: fem.FemOperators, cloud: ParticleCloud, schedule: ControlSchedule,
              config, seed: int, n_sgd: Optional[int] = None) -> Tuple[ControlSchedule, List[Dict[str, float]]]:
    """
    n_sgd iterations of: pick a start particle, simulate one realization on
    [t_n, T] with fresh noise, solve backward, form psi, take an SGD step.

    The "baseline" z2 estimator uses the mean cost-to-go of all earlier
    rollouts at this outer step; the first iteration runs without one.

    Returns:
        (optimized schedule, one trace row per iteration)
    """
    n_sgd = config.n_sgd if n_sgd is None else n_sgd
    n = schedule.start
    n_steps = schedule.length - 1
    observation_driven = config.rollout_mode == "observation_driven"
    z2_estimator = config.z2_estimator
    trace = []
    fixed_particle = None
    if config.particle_refresh == "fixed":
        fixed_particle = select_particle(cloud, noise.generator(seed, noise.SELECTION, n), config.particle_select)
    cost_to_go_sum = np.zeros(n_steps + 1)
    n_rollouts = 0

    for iteration in range(n_sgd):
        baseline = cost_to_go_sum / n_rollouts if n_rollouts else None
        rollouts = []
        for sample in range(config.batch_size):
            if fixed_particle is None:
                rng = noise.generator(seed, noise.SELECTION, n, iteration, sample)
                index = select_particle(cloud, rng, config.particle_select)
            else:
                index = fixed_particle
            drivers = noise.sample_path(seed, (noise.ROLLOUT, n, iteration, sample), max(n_steps, 1),
                                        model.n_noise_modes, model.obs_dim, ops.dt)
            rollouts.append(rollout_gradient(
                model, ops, cloud.positions[index], schedule.controls, drivers.dW[:n_steps], drivers.dB[:n_steps],
                start=n, hxp_mode=config.hxp_mode, observation_driven=observation_driven,
                z2_estimator=z2_estimator, baseline=baseline))
        for rollout in rollouts:
            cost_to_go_sum += rollout.cost_to_go
        n_rollouts += len(rollouts)

        costs = np.array([r.cost for r in rollouts])
        log_likelihoods = [r.log_likelihood for r in rollouts]
        weights = softmax(log_likelihoods) if observation_driven else np.full(len(costs), 1.0 / len(costs))
        psi = np.tensordot(weights, np.array([r.psi for r in rollouts]), axes=1)
        alpha = step_size(config.learning_rate, iteration, config.lr_schedule)
        schedule = sgd_step(schedule, psi, model, learning_rate=alpha)

        norm = np.sqrt(max(schedule_pairing(psi, psi, ops), 0.0)) if n_steps else 0.0
        cost = float(weights @ costs)
        trace.append({"outer_step": n, "iteration": iteration, "gradient_norm": norm,
                      "sample_cost": cost, "learning_rate": alpha})
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug("t_%d iteration %d: |psi| = %.3e, sampled cost %.5f", n, iteration, norm, cost)
    return schedule, trace


def _chunk_costs(model: ModelSpec, ops: fem.FemOperators, controls: NDArray, seed: int, stream: int,
                 indices: Sequence[int], start: int, initial_states: Optional[NDArray]) -> NDArray:
    n_steps = controls.shape[0] - 1
    if n_steps == 0:
        states = np.array([initial_states[i] if initial_states is not None else model.initial_state
                           for i in indices])
        return np.asarray(terminal_cost(model, states, ops), dtype=np.float64).reshape(-1)

    paths = [noise.sample_path(seed, (noise.COST, stream, i), n_steps, model.n_noise_modes,
                               model.obs_dim, ops.dt) for i in indices]
    dW = np.stack([p.dW for p in paths], axis=1)
    dB = np.stack([p.dB for p in paths], axis=1)
    if initial_states is None:
        x0 = np.stack([sample_initial(model, noise.generator(seed, noise.COST, stream, i, 2), 1)[0]
                       for i in indices])
    else:
        x0 = initial_states[list(indices)]
    return np.asarray(rollout_cost(model, ops, x0, controls, dW, dB, start=start)).reshape(-1)


def estimate_cost(model: ModelSpec, controls: ArrayLike, n_samples: int, seed: int, ops: fem.FemOperators,
                  start: int = 0, initial_states: Optional[ArrayLike] = None, threads: int = 1,
                  stream: int = 0) -> Tuple[float, float]:
    """
    Monte-Carlo mean and standard error of the cost of a schedule.

    Samples are independent substreams (COST, stream, i); chunks of them are
    simulated as one batch, optionally on a thread pool. Identical
    (seed, stream) give identical results for any thread count.
    """
    if int(n_samples) != n_samples or n_samples < 1:
        raise ConfigurationError(f"need at least one sample, got {n_samples}", key="n_cost_samples")
    controls = ops.check(controls)
    if initial_states is not None:
        initial_states = ops.check(initial_states)
        if initial_states.shape[0] != n_samples:
            raise ShapeError(f"{initial_states.shape[0]} initial states for {n_samples} samples")

    chunks = [range(i, min(i + COST_CHUNK, n_samples)) for i in range(0, n_samples, COST_CHUNK)]

    def run_chunk(indices):
        return _chunk_costs(model, ops, controls, seed, stream, indices, start, initial_states)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            costs = np.concatenate(list(executor.map(run_chunk, chunks)))
    else:
        costs = np.concatenate([run_chunk(c) for c in chunks])

    mean = float(np.mean(costs))
    stderr = float(np.std(costs, ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return mean, stderr


def run_algorithm1(config, truth_noise: Optional[noise.NoisePath] = None,
                   ops: Optional[fem.FemOperators] = None, model: Optional[ModelSpec] = None) -> RunReport:
    """
    Receding-horizon SGD with branching particle filtering over n = 0..N_T.

    Args:
        config: resolved RunConfig
        truth_noise: optional W/B increments for the truth (replaces the
            TRUTH substream; causality checks perturb them)
        ops, model: prebuilt operators and model; built from config when omitted

    Returns:
        RunReport with the committed controls, the truth and observation
        paths, the traces and the cost summaries
    """
    started = time.perf_counter()
    seed = config.seed
    ops = ops or fem.assemble(config.length, config.n_elems, config.dt)
    model = model or build_model(config, ops)
    n_steps = config.n_steps
    branch_every = config.branch_every

    if truth_noise is None:
        truth_noise = noise.sample_path(seed, noise.TRUTH, max(n_steps, 1), model.n_noise_modes,
                                        model.obs_dim, ops.dt)
    if truth_noise.n_steps < n_steps:
        raise ShapeError(f"truth noise covers {truth_noise.n_steps} steps, run needs {n_steps}")

    truth = np.empty((n_steps + 1, ops.n_dof))
    truth[0] = sample_initial(model, noise.generator(seed, noise.TRUTH, 2), 1)[0]
    dY = np.empty((n_steps, model.obs_dim))
    committed = np.zeros((n_steps + 1, ops.n_dof))
    cloud = init_cloud(config.n_particles, lambda rng, count: sample_initial(model, rng, count), seed)
    report = RunReport(config=config.to_dict(), seed=seed, controls=committed, truth=None, observations=None)
    logger.info("running %s: N_T=%d, S=%d, n_sgd=%d, branching every %d steps",
                model.name, n_steps, cloud.size, config.n_sgd, branch_every)

    schedule = zero_schedule(0, n_steps, ops, config.learning_rate)
    for n in range(n_steps + 1):
        step_started = time.perf_counter()
        if config.warm_start and n > 0:
            schedule = ControlSchedule(n, schedule.controls[1:].copy(), 0, config.learning_rate)
        else:
            schedule = zero_schedule(n, n_steps, ops, config.learning_rate)
        try:
            schedule, rows = inner_sgd(model, ops, cloud, schedule, config, seed)
        except SolverError:
            logger.error("inner optimization failed at outer step %d", n)
            raise
        report.sgd_trace.extend(rows)
        committed[n] = schedule.current

        # conditional cost of the optimized schedule, from particles drawn by weight
        picks = noise.generator(seed, noise.COST, n, 1).choice(
            cloud.size, size=config.n_cost_samples, p=cloud.normalized_weights)
        mean, stderr = estimate_cost(model, schedule.controls, config.n_cost_samples, seed, ops, start=n,
                                     initial_states=cloud.positions[picks], threads=config.threads, stream=n)
        report.cost_trace.append({"outer_step": n, "t": n * ops.dt, "cost_mean": mean, "cost_stderr": stderr})
        if n == n_steps:
            report.timings[f"outer_{n}"] = time.perf_counter() - step_started
            logger.info("t_%d: conditional cost %.5f +- %.5f", n, mean, stderr)
            break

        u = committed[n]
        truth[n + 1] = step_truth(truth[n], u, truth_noise.dW[n], truth_noise.dB[n], model, ops, step=n)
        dY[n] = observation_increment(truth[n], u, truth_noise.dB[n], model, ops)

        dW = particle_increments(seed, n, cloud.size, model.n_noise_modes, ops.dt)
        cloud = propagate_and_weight(cloud, u, dY[n], dW, model, ops, step=n, weighted=config.filtering)
        if config.filtering and (n + 1) % branch_every == 0:
            cloud = branch(cloud, noise.generator(seed, noise.BRANCHING, n + 1), step=n + 1)

        row = {"step": n + 1, "t": (n + 1) * ops.dt}
        row.update(diagnostics(cloud, model, ops))
        row["truth_first_mode"] = float(fem.inner_product(truth[n + 1], model.noise_modes[0], ops))
        report.filter_trace.append(row)
        report.timings[f"outer_{n}"] = time.perf_counter() - step_started
        logger.info("t_%d: conditional cost %.5f +- %.5f, ESS %.1f, %.2fs",
                    n, mean, stderr, row["ess"], report.timings[f"outer_{n}"])

    report.truth = StatePath(states=truth, controls=committed, dW=truth_noise.dW[:n_steps],
                             dB=truth_noise.dB[:n_steps], dt=ops.dt)
    report.observations = ObservationPath.from_increments(dY)
    # same initial state and noise as the truth, u = 0
    report.uncontrolled = simulate_truth(truth[0], np.zeros_like(committed), report.truth.dW, report.truth.dB,
                                         model, ops)
    report.realized_cost = float(path_cost(report.truth, model, ops))

    final_stream = n_steps + 1
    report.committed_cost = estimate_cost(model, committed, config.n_cost_samples, seed, ops,
                                          threads=config.threads, stream=final_stream)
    report.baseline_cost = estimate_cost(model, np.zeros_like(committed), config.n_cost_samples, seed, ops,
                                         threads=config.threads, stream=final_stream)
    report.timings["total"] = time.perf_counter() - started
    logger.info("committed cost %.5f +- %.5f, uncontrolled %.5f +- %.5f, realized %.5f",
                *report.committed_cost, *report.baseline_cost, report.realized_cost)
    return report
