"""
Run configuration for the SPDE control solver.
Defaults, named presets, JSON config files and key=value overrides are
layered into one immutable RunConfig.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Iterable, Mapping, Optional

from errors import ConfigurationError

logger = logging.getLogger(__name__)


# heat_benchmark parameters
DEFAULT_CONFIG: Dict[str, Any] = {
    "model": "heat_benchmark",
    "length": 10.0,
    "horizon": 1.0,
    "dt": 0.01,
    "n_elems": 400,
    "n_noise_modes": 50,
    "obs_dim": 5,
    "n_particles": 200,
    "branch_interval": 0.05,
    "learning_rate": 0.001,
    "lr_schedule": "constant",
    "n_sgd": 1000,
    "batch_size": 1,
    "particle_select": "weighted",
    "particle_refresh": "per_iteration",
    "rollout_mode": "fresh_brownian",
    "hxp_mode": "transposed",
    "z2_estimator": "pathwise",
    "warm_start": False,
    "filtering": True,
    "sigma_amplitude": 0.05,
    "g_amplitude": 0.03,
    "obs_gain": 1.0,
    "sensor_width": 0.5,
    "initial_spread": 0.0,
    "control_lower": None,
    "control_upper": None,
    "n_cost_samples": 200,
    "threads": 1,
    "seed": 0,
    "output_dir": "results",
    "dump_noise": False,
    "dump_paths": False,
    "dump_adjoint": False,
}

PRESETS: Dict[str, Dict[str, Any]] = {
    "heat_benchmark": {},
    "linear_gaussian_test": {
        "model": "linear_gaussian_test",
        "g_amplitude": 0.0,
        "initial_spread": 0.1,
    },
    "uncontrolled": {"n_sgd": 0, "learning_rate": 0.0},
}

CHOICES = {
    "lr_schedule": ("constant", "inverse"),
    "particle_select": ("weighted", "uniform"),
    "particle_refresh": ("per_iteration", "fixed"),
    "rollout_mode": ("fresh_brownian", "observation_driven"),
    "hxp_mode": ("scalar_pairing", "pointwise", "transposed"),
    "z2_estimator": ("pathwise", "baseline", "martingale"),
}

POSITIVE = ("length", "horizon", "dt", "n_elems", "n_noise_modes", "obs_dim", "n_particles",
            "branch_interval", "batch_size", "sensor_width", "n_cost_samples", "threads")
NON_NEGATIVE = ("learning_rate", "n_sgd", "sigma_amplitude", "initial_spread", "seed")
OPTIONAL_FLOATS = ("control_lower", "control_upper")
DIVISION_TOLERANCE = 1e-12


@dataclass(frozen=True)
class RunConfig:
    model: str
    length: float
    horizon: float
    dt: float
    n_elems: int
    n_noise_modes: int
    obs_dim: int
    n_particles: int
    branch_interval: float
    learning_rate: float
    lr_schedule: str
    n_sgd: int
    batch_size: int
    particle_select: str
    particle_refresh: str
    rollout_mode: str
    hxp_mode: str
    z2_estimator: str
    warm_start: bool
    filtering: bool
    sigma_amplitude: float
    g_amplitude: float
    obs_gain: float
    sensor_width: float
    initial_spread: float
    control_lower: Optional[float]
    control_upper: Optional[float]
    n_cost_samples: int
    threads: int
    seed: int
    output_dir: str
    dump_noise: bool
    dump_paths: bool
    dump_adjoint: bool

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def branch_every(self) -> int:
        return int(round(self.branch_interval / self.dt))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULT_CONFIG[key]
    if key in OPTIONAL_FLOATS:
        if value is None:
            return None
        default = 0.0
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigurationError(f"expected true or false, got {value!r}", key=key)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigurationError(f"expected an integer, got {value!r}", key=key)
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"expected a number, got {value!r}", key=key)
        return float(value)
    if not isinstance(value, str):
        raise ConfigurationError(f"expected a string, got {value!r}", key=key)
    return value


def _divides(step: float, total: float) -> bool:
    count = round(total / step)
    return count >= 1 and abs(total - count * step) <= DIVISION_TOLERANCE * max(1.0, abs(total))


def validate(values: Mapping[str, Any]) -> None:
    """Raise ConfigurationError naming the first invalid key"""
    for key in POSITIVE:
        if not values[key] > 0:
            raise ConfigurationError(f"must be positive, got {values[key]}", key=key)
    for key in NON_NEGATIVE:
        if values[key] < 0:
            raise ConfigurationError(f"must not be negative, got {values[key]}", key=key)
    for key, options in CHOICES.items():
        if values[key] not in options:
            raise ConfigurationError(f"{values[key]!r} is not one of {options}", key=key)
    if values["n_elems"] < 2:
        raise ConfigurationError(f"need at least 2 elements, got {values['n_elems']}", key="n_elems")
    if values["n_noise_modes"] > values["n_elems"] - 1:
        raise ConfigurationError(f"at most {values['n_elems'] - 1} modes on this mesh", key="n_noise_modes")
    if not _divides(values["dt"], values["horizon"]):
        raise ConfigurationError(f"time step {values['dt']} does not divide horizon {values['horizon']}", key="dt")
    if not _divides(values["dt"], values["branch_interval"]):
        raise ConfigurationError(f"time step {values['dt']} does not divide {values['branch_interval']}",
                                 key="branch_interval")
    lower, upper = values["control_lower"], values["control_upper"]
    if lower is not None and upper is not None and lower > upper:
        raise ConfigurationError(f"lower bound {lower} exceeds upper bound {upper}", key="control_lower")


def parse_override(text: str) -> Dict[str, Any]:
    """'key=value' with a JSON value; bare words are taken as strings"""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigurationError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {key.strip(): value}


def load_config_file(path: str) -> Dict[str, Any]:
    """Read a JSON config file into a dict of keys to override"""
    if not os.path.exists(path):
        raise ConfigurationError(f"config file {path} does not exist", key="config")
    try:
        with open(path, "r") as f:
            values = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path} is not valid JSON: {e}", key="config") from e
    if not isinstance(values, dict):
        raise ConfigurationError(f"{path} must hold a JSON object", key="config")
    return values


def parse_config(source: Optional[Mapping[str, Any]] = None, preset: Optional[str] = None,
                 path: Optional[str] = None, overrides: Iterable[str] = (),
                 seed: Optional[int] = None, output_dir: Optional[str] = None) -> RunConfig:
    """
    Resolve a RunConfig from, in increasing precedence: defaults, preset,
    a mapping or JSON file, key=value overrides, then seed and output_dir.
    """
    values = dict(DEFAULT_CONFIG)
    layers = []
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}", key="preset")
        layers.append(PRESETS[preset])
    if source is not None:
        layers.append(source)
    if path is not None:
        layers.append(load_config_file(path))
    layers.extend(parse_override(text) for text in overrides)
    if seed is not None:
        layers.append({"seed": seed})
    if output_dir is not None:
        layers.append({"output_dir": output_dir})

    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULT_CONFIG:
                raise ConfigurationError("unknown configuration key", key=key)
            values[key] = _coerce(key, value)
    validate(values)
    return RunConfig(**{f.name: values[f.name] for f in fields(RunConfig)})


def save_config(config: RunConfig, path: str) -> None:
    """Echo the resolved configuration as JSON; parse_config(path=...) reproduces it"""
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    logger.debug("configuration written to %s", path)
