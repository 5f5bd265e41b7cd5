import csv
import json
import logging
import os
import subprocess
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Artifact file names
COST_TRACE_FILE = "cost_trace.csv"
SGD_TRACE_FILE = "sgd_trace.csv"
FILTER_TRACE_FILE = "filter_trace.csv"
CONTROL_FILE = "control_final.csv"
STATE_FILE = "state_snapshots.csv"
UNCONTROLLED_FILE = "uncontrolled_path.csv"
CONFIG_ECHO_FILE = "config.json"
MANIFEST_FILE = "manifest.json"
NOISE_DUMP_FILE = "truth_noise.csv"
PATH_DUMP_FILE = "truth_observations.csv"
ADJOINT_DUMP_FILE = "adjoint_summary.csv"

COST_COLUMNS = ["outer_step", "t", "cost_mean", "cost_stderr"]
SGD_COLUMNS = ["outer_step", "iteration", "gradient_norm", "sample_cost", "learning_rate"]
FILTER_COLUMNS = ["step", "t", "ess", "min_weight", "max_weight", "mean_norm", "mean_first_mode",
                  "truth_first_mode"]


def ensure_output_dir(path: str) -> str:
    """Ensure that the output directory exists"""
    os.makedirs(path, exist_ok=True)
    return path


def format_value(value: Any) -> str:
    """Floats with 17 significant digits so a reread is bit-exact"""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def write_csv(file_path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(file_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def write_records(file_path: str, columns: Sequence[str], records: Iterable[Dict[str, Any]]) -> None:
    """Write dict rows in a fixed column order"""
    write_csv(file_path, columns, ([record[c] for c in columns] for record in records))


def write_nodal(file_path: str, values: np.ndarray, dt: float, start: int = 0) -> None:
    """One row per time node: step, t, nodal values"""
    n_dof = values.shape[-1]
    header = ["step", "t"] + [f"x{i}" for i in range(1, n_dof + 1)]
    write_csv(file_path, header, ([start + k, (start + k) * dt, *row] for k, row in enumerate(values)))


def read_csv(file_path: str) -> List[Dict[str, str]]:
    """Read a CSV artifact back as a list of dicts"""
    try:
        with open(file_path, "r", newline="") as f:
            return list(csv.DictReader(f))
    except FileNotFoundError:
        return []


def write_json(file_path: str, payload: Dict[str, Any]) -> None:
    with open(file_path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def git_revision(path: Optional[str] = None) -> Optional[str]:
    """Current commit hash, or None outside a git checkout"""
    try:
        result = subprocess.run(["git", "rev-parse", "HEAD"], cwd=path or os.path.dirname(os.path.abspath(__file__)),
                                capture_output=True, text=True, timeout=10, check=True)
        return result.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def write_report(report, output_dir: str) -> List[str]:
    """
    Write the run artifacts into output_dir.

    Returns:
        The paths written
    """
    ensure_output_dir(output_dir)
    dt = report.truth.dt
    paths = []

    def target(name: str) -> str:
        path = os.path.join(output_dir, name)
        paths.append(path)
        return path

    write_records(target(COST_TRACE_FILE), COST_COLUMNS, report.cost_trace)
    write_records(target(SGD_TRACE_FILE), SGD_COLUMNS, report.sgd_trace)
    write_records(target(FILTER_TRACE_FILE), FILTER_COLUMNS, report.filter_trace)
    write_nodal(target(CONTROL_FILE), report.controls, dt)
    write_nodal(target(STATE_FILE), report.truth.states, dt)
    if report.uncontrolled is not None:
        write_nodal(target(UNCONTROLLED_FILE), report.uncontrolled.states, dt)
    write_json(target(MANIFEST_FILE), {
        "config": report.config,
        "seed": report.seed,
        "git_revision": git_revision(),
        "wall_time": report.timings.get("total"),
        "realized_cost": report.realized_cost,
        "committed_cost": {"mean": report.committed_cost[0], "stderr": report.committed_cost[1]},
        "baseline_cost": {"mean": report.baseline_cost[0], "stderr": report.baseline_cost[1]},
    })
    logger.info("wrote %d artifacts to %s", len(paths), output_dir)
    return paths


def dump_noise(output_dir: str, dW: np.ndarray, dB: np.ndarray, dt: float) -> str:
    """Truth increments: step, t, dW_1..dW_NW, dB_1..dB_d"""
    path = os.path.join(ensure_output_dir(output_dir), NOISE_DUMP_FILE)
    header = (["step", "t"] + [f"dW{i}" for i in range(1, dW.shape[1] + 1)]
              + [f"dB{j}" for j in range(1, dB.shape[1] + 1)])
    write_csv(path, header, ([k, k * dt, *w, *b] for k, (w, b) in enumerate(zip(dW, dB))))
    return path


def dump_paths(output_dir: str, Y: np.ndarray, sensor_values: np.ndarray, dt: float) -> str:
    """Observation path and the sensor pairings of the truth: step, t, Y_j, h_j"""
    path = os.path.join(ensure_output_dir(output_dir), PATH_DUMP_FILE)
    d = Y.shape[1]
    header = ["step", "t"] + [f"Y{j}" for j in range(1, d + 1)] + [f"h{j}" for j in range(1, d + 1)]
    write_csv(path, header, ([k, k * dt, *y, *h] for k, (y, h) in enumerate(zip(Y, sensor_values))))
    return path


def dump_adjoint(output_dir: str, rows: Sequence[Sequence[float]], obs_dim: int) -> str:
    """Adjoint summary: t, |p_t|, z_t, z2_t"""
    path = os.path.join(ensure_output_dir(output_dir), ADJOINT_DUMP_FILE)
    header = ["t", "p_norm", "z"] + [f"z2_{j}" for j in range(1, obs_dim + 1)]
    write_csv(path, header, rows)
    return path
