"""
The controlled SPDE problem: Nemytskii coefficients, the observation map,
cost integrands, their derivatives, the admissible-set projection, and the
named model presets.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

import fem
import noise
from errors import ConfigurationError, ModelError, ShapeError

logger = logging.getLogger(__name__)

PointwiseFn = Callable[[NDArray, Optional[NDArray]], NDArray]


def _shape(x: ArrayLike, u: Optional[ArrayLike]) -> Tuple[int, ...]:
    if u is None:
        return np.shape(x)
    return np.broadcast_shapes(np.shape(x), np.shape(u))


def constant(value: float) -> PointwiseFn:
    return lambda x, u=None: np.full(_shape(x, u), float(value))


@dataclass(frozen=True)
class PointwiseMap:
    """A pointwise map f(x, u) with its partial derivatives"""

    value: PointwiseFn
    dx: PointwiseFn
    du: Optional[PointwiseFn] = None
    constant_in_x: bool = False


@dataclass(frozen=True, eq=False)
class SensorObservation:
    """
    h^j(x, u) = gain * link(<x (+ u), sensor_j>_{L2}) for a set of sensor fields.

    link is "arctan" (bounded, the benchmark) or "linear" (the
    linear-Gaussian test model). Representers are with respect to the
    consistent mass pairing.
    """

    sensors: NDArray[np.float64]
    sensor_duals: NDArray[np.float64]
    link: str = "arctan"
    gain: float = 1.0
    control_coupled: bool = True

    @property
    def obs_dim(self) -> int:
        return self.sensors.shape[0]

    def pairings(self, x: NDArray, u: Optional[NDArray]) -> NDArray[np.float64]:
        argument = x + u if (self.control_coupled and u is not None) else x
        return argument @ self.sensor_duals.T

    def value(self, x: NDArray, u: Optional[NDArray]) -> NDArray[np.float64]:
        s = self.pairings(x, u)
        if self.link == "arctan":
            return self.gain * np.arctan(s)
        return self.gain * s

    def slope(self, x: NDArray, u: Optional[NDArray]) -> NDArray[np.float64]:
        s = self.pairings(x, u)
        if self.link == "arctan":
            return self.gain / (1.0 + s * s)
        return np.full(s.shape, self.gain)

    @property
    def bound(self) -> float:
        """Sup-norm bound of each component, inf for the linear link"""
        return abs(self.gain) * np.pi / 2 if self.link == "arctan" else np.inf


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Full coefficient set of the controlled state/observation system"""

    name: str
    b: PointwiseMap
    sigma: Tuple[PointwiseMap, ...]
    g: Tuple[PointwiseMap, ...]
    g_directions: NDArray[np.float64]
    h: SensorObservation
    ell: PointwiseMap
    m: PointwiseMap
    noise_modes: NDArray[np.float64]
    initial_state: NDArray[np.float64]
    initial_spread: float = 0.0
    project_U: Callable[[NDArray], NDArray] = lambda u: u

    @property
    def obs_dim(self) -> int:
        return self.h.obs_dim

    @property
    def n_noise_modes(self) -> int:
        return self.noise_modes.shape[0]

    @property
    def shared_sigma(self) -> bool:
        return all(s is self.sigma[0] for s in self.sigma)

    @property
    def sigma_is_additive(self) -> bool:
        return all(s.constant_in_x for s in self.sigma)


@dataclass(frozen=True)
class BoxProjection:
    """Metric projection onto the nodewise box [lower, upper]"""

    lower: Optional[float] = None
    upper: Optional[float] = None

    def __call__(self, u: NDArray) -> NDArray:
        return np.clip(u, self.lower, self.upper)


def identity_projection(u: NDArray) -> NDArray:
    return u


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def apply_nemytskii(f: PointwiseFn, x: ArrayLike, u: Optional[ArrayLike] = None) -> NDArray[np.float64]:
    """[f(x, u)](lambda_i) = f(x(lambda_i), u(lambda_i)) nodewise"""
    x = np.asarray(x, dtype=np.float64)
    if u is not None:
        u = np.asarray(u, dtype=np.float64)
        if u.shape[-1:] != x.shape[-1:]:
            raise ShapeError(f"state shape {x.shape} and control shape {u.shape} differ")
    return np.asarray(f(x, u), dtype=np.float64) * np.ones(_shape(x, u))


def g_fields(model: ModelSpec, x: NDArray) -> NDArray[np.float64]:
    """g^j(x) = amplitude_j(x) * e_j, shape (..., d, n_dof)"""
    amplitudes = np.stack([gj.value(x, None) for gj in model.g], axis=-2)
    return amplitudes * model.g_directions


def g_derivative_fields(model: ModelSpec, x: NDArray) -> NDArray[np.float64]:
    amplitudes = np.stack([gj.dx(x, None) for gj in model.g], axis=-2)
    return amplitudes * model.g_directions


def observe(model: ModelSpec, x: ArrayLike, u: Optional[ArrayLike], ops: fem.FemOperators) -> NDArray[np.float64]:
    """h(x, u) in R^d (batched over leading axes of x)"""
    x = ops.check(x)
    u = None if u is None else ops.check(u)
    return model.h.value(x, u)


def observation_gradient(model: ModelSpec, x: ArrayLike, u: Optional[ArrayLike],
                         ops: fem.FemOperators) -> Tuple[NDArray, NDArray]:
    """
    Representers of the Frechet derivatives of h^j with respect to x and u.

    Returns:
        (h_x, h_u), each of shape (..., d, n_dof); <h_x[j], dx>_{L2} is the
        directional derivative of h^j along dx.
    """
    x = ops.check(x)
    u = None if u is None else ops.check(u)
    slope = model.h.slope(x, u)
    h_x = slope[..., :, None] * model.h.sensors
    h_u = h_x if model.h.control_coupled else np.zeros_like(h_x)
    return h_x, h_u


def running_cost(model: ModelSpec, x: ArrayLike, u: ArrayLike, ops: fem.FemOperators):
    """L(x, u) = integral of ell(x, u) by mass-matrix quadrature"""
    return fem.quadrature(apply_nemytskii(model.ell.value, ops.check(x), ops.check(u)), ops)


def terminal_cost(model: ModelSpec, x: ArrayLike, ops: fem.FemOperators):
    """Integral of m(x) by mass-matrix quadrature"""
    return fem.quadrature(apply_nemytskii(model.m.value, ops.check(x)), ops)


def verify_derivatives(model: ModelSpec, ops: fem.FemOperators, seed: int = 0,
                       rtol: float = 1e-5, eps: float = 1e-6) -> None:
    """
    Check every supplied derivative against central differences of its
    primitive at random points. Raises ModelError on the first mismatch.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(ops.n_dof)
    u = rng.standard_normal(ops.n_dof)

    def compare(name: str, analytic: NDArray, numeric: NDArray) -> None:
        scale = np.maximum(1.0, np.abs(analytic))
        error = np.max(np.abs(analytic - numeric) / scale)
        if error > rtol:
            raise ModelError(f"{model.name}: derivative {name} disagrees with central differences "
                             f"(relative error {error:.2e})")

    pointwise = [("b", model.b, True), ("ell", model.ell, True), ("m", model.m, False)]
    pointwise += [(f"sigma[{i}]", s, False) for i, s in enumerate(model.sigma)]
    pointwise += [(f"g[{j}]", gj, False) for j, gj in enumerate(model.g)]
    for name, f, uses_u in pointwise:
        uu = u if uses_u else None
        numeric = (f.value(x + eps, uu) - f.value(x - eps, uu)) / (2 * eps)
        compare(f"{name}_x", apply_nemytskii(f.dx, x, uu), numeric)
        if uses_u and f.du is not None:
            numeric = (f.value(x, u + eps) - f.value(x, u - eps)) / (2 * eps)
            compare(f"{name}_u", apply_nemytskii(f.du, x, u), numeric)

    # keep the sensor arguments O(1) so arctan is not saturated
    x_small = 0.1 * x
    u_small = 0.1 * u
    direction = rng.standard_normal(ops.n_dof)
    h_x, h_u = observation_gradient(model, x_small, u_small, ops)
    numeric = (observe(model, x_small + eps * direction, u_small, ops)
               - observe(model, x_small - eps * direction, u_small, ops)) / (2 * eps)
    compare("h_x", fem.inner_product(h_x, direction, ops), numeric)
    numeric = (observe(model, x_small, u_small + eps * direction, ops)
               - observe(model, x_small, u_small - eps * direction, ops)) / (2 * eps)
    compare("h_u", fem.inner_product(h_u, direction, ops), numeric)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def gaussian_sensors(ops: fem.FemOperators, count: int, width: float = 0.5) -> NDArray[np.float64]:
    """Unit-L2 Gaussian bumps centred at j*L/(count+1), j = 1..count"""
    mesh = ops.mesh
    centres = mesh.length * np.arange(1, count + 1) / (count + 1)
    bumps = np.exp(-(mesh.interior_coords[None, :] - centres[:, None]) ** 2 / (2.0 * width ** 2))
    return bumps / fem.l2_norm(bumps, ops)[:, None]


def _sensor_observation(ops: fem.FemOperators, obs_dim: int, width: float, link: str,
                        gain: float, control_coupled: bool) -> SensorObservation:
    sensors = gaussian_sensors(ops, obs_dim, width)
    return SensorObservation(sensors=sensors, sensor_duals=ops.mass_apply(sensors),
                             link=link, gain=gain, control_coupled=control_coupled)


def _projection(lower: Optional[float], upper: Optional[float]) -> Callable[[NDArray], NDArray]:
    if lower is None and upper is None:
        return identity_projection
    if lower is not None and upper is not None and lower > upper:
        raise ConfigurationError(f"lower bound {lower} exceeds upper bound {upper}", key="control_lower")
    return BoxProjection(lower, upper)


QUADRATIC_COST = PointwiseMap(
    value=lambda x, u: 0.5 * (x * x + u * u),
    dx=lambda x, u: x * np.ones(_shape(x, u)),
    du=lambda x, u: u * np.ones(_shape(x, u)),
)
QUADRATIC_TERMINAL = PointwiseMap(value=lambda x, u=None: 0.5 * x * x, dx=lambda x, u=None: np.array(x, dtype=float))
CONTROL_DRIFT = PointwiseMap(
    value=lambda x, u: u * np.ones(_shape(x, u)),
    dx=constant(0.0),
    du=constant(1.0),
)


def heat_benchmark(ops: fem.FemOperators, obs_dim: int = 5, n_noise_modes: int = 50,
                   sigma_amplitude: float = 0.05, g_amplitude: float = 0.03, obs_gain: float = 1.0,
                   sensor_width: float = 0.5, initial_spread: float = 0.0,
                   control_lower: Optional[float] = None, control_upper: Optional[float] = None) -> ModelSpec:
    """
    Stochastic heat equation with distributed control:
    dx = [Lap x + u] dt + 0.05 dW + sum_j 0.03 (x + 1) e_j dB^j,
    h = arctan(<x + u, sensor_j>), ell = (x^2 + u^2)/2, m = x^2/2.
    """
    if n_noise_modes > ops.n_dof:
        raise ConfigurationError(f"at most {ops.n_dof} modes on this mesh, got {n_noise_modes}",
                                 key="n_noise_modes")
    sigma = PointwiseMap(value=constant(sigma_amplitude), dx=constant(0.0), constant_in_x=True)
    g = PointwiseMap(value=lambda x, u=None: g_amplitude * (x + 1.0), dx=constant(g_amplitude),
                     constant_in_x=(g_amplitude == 0.0))
    length = ops.mesh.length
    return ModelSpec(
        name="heat_benchmark",
        b=CONTROL_DRIFT,
        sigma=(sigma,) * n_noise_modes,
        g=(g,) * obs_dim,
        g_directions=noise.sine_modes(ops, obs_dim),
        h=_sensor_observation(ops, obs_dim, sensor_width, "arctan", obs_gain, control_coupled=True),
        ell=QUADRATIC_COST,
        m=QUADRATIC_TERMINAL,
        noise_modes=noise.sine_modes(ops, n_noise_modes),
        initial_state=fem.interpolate(lambda lam: np.sin(np.pi * lam / length), ops),
        initial_spread=initial_spread,
        project_U=_projection(control_lower, control_upper),
    )


def linear_gaussian_test(ops: fem.FemOperators, obs_dim: int = 5, n_noise_modes: int = 50,
                         sigma_amplitude: float = 0.05, obs_gain: float = 1.0, sensor_width: float = 0.5,
                         initial_spread: float = 0.1, control_lower: Optional[float] = None,
                         control_upper: Optional[float] = None, **_: Any) -> ModelSpec:
    """
    Linear-Gaussian variant admitting an exact Kalman filter: additive W
    noise, no correlated B noise in the state, linear sensors on x only.
    """
    base = heat_benchmark(ops, obs_dim=obs_dim, n_noise_modes=n_noise_modes,
                          sigma_amplitude=sigma_amplitude, g_amplitude=0.0, obs_gain=obs_gain,
                          sensor_width=sensor_width, initial_spread=initial_spread,
                          control_lower=control_lower, control_upper=control_upper)
    zero = PointwiseMap(value=constant(0.0), dx=constant(0.0), constant_in_x=True)
    return ModelSpec(
        name="linear_gaussian_test",
        b=base.b, sigma=base.sigma, g=(zero,) * obs_dim, g_directions=base.g_directions,
        h=_sensor_observation(ops, obs_dim, sensor_width, "linear", obs_gain, control_coupled=False),
        ell=base.ell, m=base.m, noise_modes=base.noise_modes,
        initial_state=base.initial_state, initial_spread=initial_spread, project_U=base.project_U,
    )


MODEL_PRESETS: Dict[str, Callable[..., ModelSpec]] = {
    "heat_benchmark": heat_benchmark,
    "linear_gaussian_test": linear_gaussian_test,
}


def build_model(config, ops: fem.FemOperators) -> ModelSpec:
    """Build the configured model preset and verify its derivatives"""
    try:
        factory = MODEL_PRESETS[config.model]
    except KeyError:
        raise ConfigurationError(f"unknown model {config.model!r}; choose from {sorted(MODEL_PRESETS)}",
                                 key="model") from None
    model = factory(
        ops,
        obs_dim=config.obs_dim,
        n_noise_modes=config.n_noise_modes,
        sigma_amplitude=config.sigma_amplitude,
        g_amplitude=config.g_amplitude,
        obs_gain=config.obs_gain,
        sensor_width=config.sensor_width,
        initial_spread=config.initial_spread,
        control_lower=config.control_lower,
        control_upper=config.control_upper,
    )
    verify_derivatives(model, ops, seed=config.seed)
    logger.info("model %s: d=%d, N_W=%d, n_dof=%d", model.name, model.obs_dim, model.n_noise_modes, ops.n_dof)
    return model


def initial_covariance(model: ModelSpec) -> NDArray[np.float64]:
    """Nodal covariance of the initial law used by sample_initial"""
    scales = model.initial_spread / np.arange(1, model.n_noise_modes + 1)
    modes = model.noise_modes
    return (modes.T * scales ** 2) @ modes


def sample_initial(model: ModelSpec, rng: np.random.Generator, count: int) -> NDArray[np.float64]:
    """Draw count states from x0 + spread * sum_i xi_i e_i / i"""
    states = np.tile(model.initial_state, (count, 1))
    if model.initial_spread > 0:
        scales = model.initial_spread / np.arange(1, model.n_noise_modes + 1)
        xi = rng.standard_normal((count, model.n_noise_modes))
        states = states + (xi * scales) @ model.noise_modes
    return states
