"""
Semi-implicit Euler-Maruyama steps for the controlled state SPDE.

The Laplacian is implicit; the drift, the noise terms and the filter
correction are evaluated at the left endpoint x_k. Everything accepts a
leading particle axis.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

import fem
import noise
from errors import BlowUpError, ShapeError
from model import ModelSpec, apply_nemytskii, g_fields, observe

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StatePath:
    """
    A discrete state trajectory on the time nodes start..start+n_steps.

    states has shape (n_steps+1, [batch,] n_dof). dB holds the
    B-increments that drove the path: the sampled ones for a truth path,
    the innovations dY - h dt for a particle path.
    """

    states: NDArray[np.float64]
    controls: NDArray[np.float64]
    dW: NDArray[np.float64]
    dB: NDArray[np.float64]
    dt: float
    start: int = 0

    @property
    def n_steps(self) -> int:
        return self.dW.shape[0]

    @property
    def final(self) -> NDArray[np.float64]:
        return self.states[-1]


@dataclass(frozen=True)
class ObservationPath:
    """Observation path Y on the time nodes, Y[0] = 0"""

    Y: NDArray[np.float64]

    @property
    def increments(self) -> NDArray[np.float64]:
        return np.diff(self.Y, axis=0)

    @classmethod
    def from_increments(cls, dY: ArrayLike) -> "ObservationPath":
        dY = np.asarray(dY, dtype=np.float64)
        return cls(np.concatenate([np.zeros((1,) + dY.shape[1:]), np.cumsum(dY, axis=0)]))


def _check_finite(x: NDArray, step: int) -> NDArray:
    if np.all(np.isfinite(x)):
        return x
    if x.ndim == 1:
        raise BlowUpError(step)
    bad = np.flatnonzero(~np.all(np.isfinite(x.reshape(-1, x.shape[-1])), axis=-1))
    raise BlowUpError(step, particle=int(bad[0]))


def _explicit_source(x: NDArray, u: NDArray, dW: NDArray, dB: NDArray,
                     model: ModelSpec, ops: fem.FemOperators) -> NDArray[np.float64]:
    # x_k + dt b + sum_i sigma^i e_i dW^i + sum_j g^j dB^j
    drift = apply_nemytskii(model.b.value, x, u)
    correlated = np.einsum("...j,...jn->...n", dB, g_fields(model, x))
    return x + ops.dt * drift + noise.apply_cylindrical(model, x, dW, ops) + correlated


def step_truth(x: ArrayLike, u: ArrayLike, dW: ArrayLike, dB: ArrayLike, model: ModelSpec,
               ops: fem.FemOperators, step: int = 0) -> NDArray[np.float64]:
    """
    One step of the state equation under the reference measure:
    (M + dt A) x_{k+1} = M [x_k + dt b(x_k, u_k) + sum_i sigma^i e_i dW^i + sum_j g^j dB^j].

    Raises:
        BlowUpError: the new state has non-finite values
    """
    x = ops.check(x)
    u = ops.check(u)
    dB = np.asarray(dB, dtype=np.float64)
    if dB.shape[-1] != model.obs_dim:
        raise ShapeError(f"expected {model.obs_dim} observation increments, got shape {dB.shape}")
    source = _explicit_source(x, u, np.asarray(dW, dtype=np.float64), dB, model, ops)
    return _check_finite(fem.implicit_step(source, ops), step + 1)


def step_particle(x: ArrayLike, u: ArrayLike, dW: ArrayLike, dY: ArrayLike, model: ModelSpec,
                  ops: fem.FemOperators, step: int = 0) -> NDArray[np.float64]:
    """
    One step of the particle dynamics driven by the observed increment dY:
    the truth step with -dt sum_j g^j h^j + sum_j g^j dY^j in place of sum_j g^j dB^j.
    """
    x = ops.check(x)
    u = ops.check(u)
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape[-1] != model.obs_dim:
        raise ShapeError(f"expected {model.obs_dim} observation increments, got shape {dY.shape}")
    # -dt g h + g dY == g (dY - h dt)
    innovation = dY - ops.dt * observe(model, x, u, ops)
    source = _explicit_source(x, u, np.asarray(dW, dtype=np.float64), innovation, model, ops)
    return _check_finite(fem.implicit_step(source, ops), step + 1)


def observation_increment(x: ArrayLike, u: ArrayLike, dB: ArrayLike, model: ModelSpec,
                          ops: fem.FemOperators) -> NDArray[np.float64]:
    """dY = h(x, u) dt + dB (leading batch axes allowed)"""
    return observe(model, ops.check(x), ops.check(u), ops) * ops.dt + np.asarray(dB, dtype=np.float64)


def synthesize_observation(truth: StatePath, model: ModelSpec, ops: fem.FemOperators,
                           dB: Optional[ArrayLike] = None) -> ObservationPath:
    """dY_k = h(x_k, u_k) dt + dB_k along the truth path, Y cumulative from 0"""
    dB = truth.dB if dB is None else np.asarray(dB, dtype=np.float64)
    n = truth.n_steps
    if dB.shape[0] != n:
        raise ShapeError(f"{dB.shape[0]} observation increments for a path of {n} steps")
    return ObservationPath.from_increments(
        observation_increment(truth.states[:n], truth.controls[:n], dB, model, ops))


def _validate_drivers(x0: NDArray, controls: NDArray, dW: NDArray, dB: NDArray) -> int:
    n_steps = dW.shape[0]
    if dB.shape[0] != n_steps:
        raise ShapeError(f"{n_steps} W-increments but {dB.shape[0]} observation increments")
    if controls.shape[0] < n_steps + 1:
        raise ShapeError(f"control schedule has {controls.shape[0]} nodes, need {n_steps + 1}")
    return n_steps


def simulate_truth(x0: ArrayLike, controls: ArrayLike, dW: ArrayLike, dB: ArrayLike,
                   model: ModelSpec, ops: fem.FemOperators, start: int = 0) -> StatePath:
    """Run step_truth over all supplied increments (x0 may be a batch)"""
    x = ops.check(np.array(x0, dtype=np.float64))
    controls = ops.check(controls)
    dW = np.asarray(dW, dtype=np.float64)
    dB = np.asarray(dB, dtype=np.float64)
    n_steps = _validate_drivers(x, controls, dW, dB)

    states = np.empty((n_steps + 1,) + x.shape)
    states[0] = x
    for k in range(n_steps):
        states[k + 1] = step_truth(states[k], controls[k], dW[k], dB[k], model, ops, step=start + k)
    return StatePath(states=states, controls=controls[:n_steps + 1], dW=dW, dB=dB, dt=ops.dt, start=start)


def simulate_particle_path(x0: ArrayLike, controls: ArrayLike, dW: ArrayLike, dY: ArrayLike,
                           model: ModelSpec, ops: fem.FemOperators, start: int = 0) -> StatePath:
    """
    Run step_particle over all supplied increments. The returned path
    records the innovations dY - h dt as its B-increments.
    """
    x = ops.check(np.array(x0, dtype=np.float64))
    controls = ops.check(controls)
    dW = np.asarray(dW, dtype=np.float64)
    dY = np.asarray(dY, dtype=np.float64)
    n_steps = _validate_drivers(x, controls, dW, dY)

    states = np.empty((n_steps + 1,) + x.shape)
    innovations = np.empty(dW.shape[:-1] + (model.obs_dim,))
    states[0] = x
    for k in range(n_steps):
        innovations[k] = dY[k] - ops.dt * observe(model, states[k], controls[k], ops)
        states[k + 1] = step_particle(states[k], controls[k], dW[k], dY[k], model, ops, step=start + k)
    return StatePath(states=states, controls=controls[:n_steps + 1], dW=dW, dB=innovations,
                     dt=ops.dt, start=start)
