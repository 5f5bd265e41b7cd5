"""
Figures of a finished run: the uncontrolled sample path, the controlled
state and the committed control as space-time surfaces.
"""

import logging
import os
from typing import List

import numpy as np
from matplotlib.figure import Figure

import fem

logger = logging.getLogger(__name__)


def create_surface_figure(values: np.ndarray, mesh: fem.Mesh1D, dt: float, title: str,
                          label: str = "x") -> Figure:
    """
    Space-time surface of nodal values (time nodes x interior nodes).

    The pinned boundary values are added back so the surface spans [0, L].
    """
    padded = np.pad(values, ((0, 0), (1, 1)))
    t = np.arange(values.shape[0]) * dt
    space, time_grid = np.meshgrid(mesh.node_coords, t)

    fig = Figure(figsize=(8, 6), dpi=100)
    ax = fig.add_subplot(111, projection="3d")
    ax.plot_surface(space, time_grid, padded, cmap="viridis", linewidth=0, antialiased=False)
    ax.set_title(title)
    ax.set_xlabel("lambda")
    ax.set_ylabel("t")
    ax.set_zlabel(label)
    return fig


def create_cost_figure(cost_trace, sgd_trace) -> Figure:
    """Conditional cost per outer step and the SGD sample costs"""
    fig = Figure(figsize=(10, 4), dpi=100)
    ax1 = fig.add_subplot(121)
    t = [row["t"] for row in cost_trace]
    mean = np.array([row["cost_mean"] for row in cost_trace])
    err = np.array([row["cost_stderr"] for row in cost_trace])
    ax1.plot(t, mean, color="tab:blue")
    ax1.fill_between(t, mean - err, mean + err, color="tab:blue", alpha=0.3)
    ax1.set_title("Conditional cost")
    ax1.set_xlabel("t")

    ax2 = fig.add_subplot(122)
    first = [row["sample_cost"] for row in sgd_trace if row["outer_step"] == 0]
    ax2.plot(np.arange(len(first)), first, color="tab:orange", linewidth=0.5)
    ax2.set_title("Sampled cost during SGD at t = 0")
    ax2.set_xlabel("iteration")
    return fig


def save_figures(report, ops: fem.FemOperators, output_dir: str) -> List[str]:
    """Render the run figures as PNG files; returns the paths written"""
    truth = report.truth
    figures = {
        "uncontrolled_path.png": create_surface_figure(report.uncontrolled.states, ops.mesh, ops.dt,
                                                       "Sample path without control"),
        "controlled_path.png": create_surface_figure(truth.states, ops.mesh, ops.dt, "Controlled sample path"),
        "control_surface.png": create_surface_figure(report.controls, ops.mesh, ops.dt, "Control", label="u"),
        "cost.png": create_cost_figure(report.cost_trace, report.sgd_trace),
    }
    paths = []
    for name, fig in figures.items():
        path = os.path.join(output_dir, name)
        fig.savefig(path)
        paths.append(path)
    logger.info("saved %d figures to %s", len(paths), output_dir)
    return paths
