"""
Reproducible Brownian increments for the truncated cylindrical Wiener
process W and the observation noise B.

Every block of randomness comes from its own counter-based (Philox)
substream keyed on (seed, purpose, indices...), so results never depend
on the order in which workers draw them.
"""

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from numpy.typing import NDArray

from errors import ConfigurationError
import fem

logger = logging.getLogger(__name__)

# substream purposes
TRUTH = 0
PARTICLES = 1
ROLLOUT = 2
COST = 3
BRANCHING = 4
INITIAL = 5
SELECTION = 6

StreamId = Union[int, Tuple[int, ...]]


def generator(seed: int, *keys: int) -> np.random.Generator:
    """Independent Philox generator for the substream (seed, *keys)"""
    if int(seed) != seed or seed < 0:
        raise ConfigurationError(f"seed must be a non-negative integer, got {seed}", key="seed")
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(sequence))


def _stream_keys(stream_id: StreamId) -> Tuple[int, ...]:
    return tuple(stream_id) if isinstance(stream_id, tuple) else (int(stream_id),)


@dataclass(frozen=True)
class NoisePath:
    """Increments of W (per retained mode) and B over a run of time steps"""

    dW: NDArray[np.float64]
    dB: NDArray[np.float64]
    dt: float
    seed: int
    stream_id: StreamId

    @property
    def n_steps(self) -> int:
        return self.dW.shape[0]


def sample_path(seed: int, stream_id: StreamId, n_steps: int, n_modes: int,
                obs_dim: int, dt: float) -> NoisePath:
    """
    Draw i.i.d. N(0, dt) increments for W and B.

    W and B use separate substreams, so changing the observation dimension
    leaves the W increments untouched.
    """
    for name, value in (("n_steps", n_steps), ("n_noise_modes", n_modes), ("obs_dim", obs_dim)):
        if int(value) != value or value < 1:
            raise ConfigurationError(f"must be a positive integer, got {value}", key=name)
    if not dt > 0:
        raise ConfigurationError(f"time step must be positive, got {dt}", key="dt")

    keys = _stream_keys(stream_id)
    scale = np.sqrt(dt)
    dW = generator(seed, *keys, 0).standard_normal((n_steps, n_modes)) * scale
    dB = generator(seed, *keys, 1).standard_normal((n_steps, obs_dim)) * scale
    return NoisePath(dW=dW, dB=dB, dt=float(dt), seed=int(seed), stream_id=stream_id)


def sine_modes(ops: fem.FemOperators, count: int) -> NDArray[np.float64]:
    """First `count` orthonormal Dirichlet eigenfunctions sqrt(2/L) sin(i pi x / L), nodal"""
    mesh = ops.mesh
    i = np.arange(1, count + 1)[:, None]
    return np.sqrt(2.0 / mesh.length) * np.sin(i * np.pi * mesh.interior_coords[None, :] / mesh.length)


def apply_cylindrical(model, x: NDArray, dW_row: NDArray, ops: fem.FemOperators) -> NDArray[np.float64]:
    """
    Sum over retained channels of sigma^i(x) e_i dW^i as a nodal field.

    x may carry a leading batch axis; dW_row then has the matching batch
    axis in front of the channel axis.
    """
    x = ops.check(x)
    dW_row = np.asarray(dW_row, dtype=np.float64)
    modes = model.noise_modes
    if dW_row.shape[-1] != modes.shape[0]:
        raise ConfigurationError(
            f"expected {modes.shape[0]} channel increments, got {dW_row.shape[-1]}", key="n_noise_modes")

    if model.shared_sigma:
        # one amplitude for every channel: sigma(x) * (sum_i e_i dW^i)
        amplitude = model.sigma[0].value(x, None)
        return amplitude * (dW_row @ modes)

    total = np.zeros(np.broadcast_shapes(x.shape, dW_row.shape[:-1] + (ops.n_dof,)))
    for i, channel in enumerate(model.sigma):
        total = total + channel.value(x, None) * modes[i] * dW_row[..., i:i + 1]
    return total
