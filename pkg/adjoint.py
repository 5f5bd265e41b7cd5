"""
Backward solvers along one forward realization: the scalar BSDE for
(z, z1, z2) and the adjoint BSPDE for (p, q1, q2).

Adjoint fields are represented in the quadrature pairing: the derivative
of the discrete cost with respect to the nodal state x_k is weights * p_k.
With this convention p at the final node is exactly m_x(x_T) and the
transport step is the exact transpose of the implicit forward step.

The observation integrand z2 comes in three estimators of the same
conditional mean E[z_{k+1} dB_k | x_k] / dt:

    martingale  z_{k+1} dB_k / dt along the path
    baseline    (z_{k+1} - c_{k+1}) dB_k / dt for a cost-to-go baseline c
                drawn independently of the path
    pathwise    <g^j(x_k), p_bar_k>_w, the B-derivative of the cost-to-go
                (Gaussian integration by parts); no dB_k / dt factor

With pathwise z2 and the transposed correction the observation terms of
the adjoint drift cancel and p is the exact derivative of the sampled cost.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

import fem
from errors import BlowUpError, ConfigurationError, ShapeError
from forward import StatePath
from model import (ModelSpec, apply_nemytskii, g_derivative_fields, g_fields, observation_gradient,
                   observe, running_cost, terminal_cost)

logger = logging.getLogger(__name__)

HXP_MODES = ("scalar_pairing", "pointwise", "transposed")
Z2_ESTIMATORS = ("pathwise", "baseline", "martingale")


@dataclass(frozen=True)
class AdjointPath:
    """
    Backward solution along one path of n_steps steps.

    p, z live on all n_steps+1 nodes; p_bar (the transported adjoint the
    integrands and the gradient use), q1, q2, z1, z2 on the n_steps left
    endpoints. q1 is None when every sigma^i is additive.
    """

    p: NDArray[np.float64]
    p_bar: NDArray[np.float64]
    q1: Optional[NDArray[np.float64]]
    q2: NDArray[np.float64]
    z: NDArray[np.float64]
    z1: NDArray[np.float64]
    z2: NDArray[np.float64]


def _check_dt(dt: float) -> None:
    if not dt > 0:
        raise ConfigurationError(f"time step must be positive, got {dt}", key="dt")


def _single(path: StatePath) -> None:
    if path.states.ndim != 2:
        raise ConfigurationError("backward solvers take one realization, not a batch", key="batch_size")


def _check_choice(value: str, choices: Sequence[str], key: str) -> None:
    if value not in choices:
        raise ConfigurationError(f"unknown mode {value!r}; choose from {tuple(choices)}", key=key)


def solve_bsde_z(path: StatePath, model: ModelSpec, ops: fem.FemOperators,
                 baseline: Optional[ArrayLike] = None) -> Tuple[NDArray, NDArray, NDArray]:
    """
    z_N = integral of m(x_N); z2_k = (z_{k+1} - c_{k+1}) dB_k / dt,
    z1_k = (z_{k+1} - c_{k+1}) dW_k / dt, z_k = z_{k+1} + dt L(x_k, u_k).

    Args:
        baseline: optional cost-to-go c on the N+1 nodes (zero when None).
            It must not depend on this path's increments, which keeps the
            integrands unbiased while removing most of their variance.

    Returns:
        (z, z1, z2) with shapes (N+1,), (N, N_W), (N, d)
    """
    _check_dt(path.dt)
    _single(path)
    n = path.n_steps
    dt = path.dt
    running = running_cost(model, path.states[:n], path.controls[:n], ops)
    shift = np.zeros(n + 1) if baseline is None else np.asarray(baseline, dtype=np.float64)
    if shift.shape != (n + 1,):
        raise ShapeError(f"baseline has shape {shift.shape}, path needs ({n + 1},)")

    z = np.empty(n + 1)
    z[n] = terminal_cost(model, path.states[n], ops)
    z1 = np.empty((n, path.dW.shape[-1]))
    z2 = np.empty((n, path.dB.shape[-1]))
    for k in range(n - 1, -1, -1):
        centred = z[k + 1] - shift[k + 1]
        z2[k] = centred * path.dB[k] / dt
        z1[k] = centred * path.dW[k] / dt
        z[k] = z[k + 1] + dt * running[k]
    return z, z1, z2


def pathwise_z2(model: ModelSpec, x: ArrayLike, p_bar: ArrayLike, ops: fem.FemOperators) -> NDArray[np.float64]:
    """<g^j(x), p_bar>_w for every sensor j (leading batch axes allowed)"""
    return fem.quadrature_pairing(g_fields(model, ops.check(x)), ops.check(p_bar)[..., None, :], ops)


def correction_term(model: ModelSpec, x: NDArray, g: NDArray, r: NDArray, p_bar: NDArray,
                    ops: fem.FemOperators, hxp_mode: str) -> NDArray[np.float64]:
    """The g^j h_x^j p term of the adjoint drift in the requested reading"""
    if hxp_mode == "scalar_pairing":
        return np.einsum("jn,j->n", g, fem.inner_product(r, p_bar, ops))
    if hxp_mode == "pointwise":
        return np.sum(g * r, axis=0) * p_bar
    if hxp_mode == "transposed":
        dual = fem.dual_to_field(ops.mass_apply(r), ops)
        return np.einsum("jn,j->n", dual, fem.quadrature_pairing(g, p_bar, ops))
    raise ConfigurationError(f"unknown mode {hxp_mode!r}; choose from {HXP_MODES}", key="hxp_mode")


def solve_bspde_p(path: StatePath, z2: Optional[ArrayLike], model: ModelSpec, ops: fem.FemOperators,
                  hxp_mode: str = "transposed", with_q1: Optional[bool] = None):
    """
    Backward recursion for the adjoint state.

    Each step transports p_{k+1} through the transposed implicit solve,
    forms the integrands from the transported value, then adds the drift
    evaluated at (x_k, u_k), one line per term.

    Args:
        z2: observation integrands from solve_bsde_z, or None to form the
            pathwise estimator from each transported adjoint

    Returns:
        (p, p_bar, q1, q2, z2); q1 is None unless with_q1 (default: sigma not additive)
    """
    _check_dt(path.dt)
    _single(path)
    _check_choice(hxp_mode, HXP_MODES, "hxp_mode")
    n = path.n_steps
    dt = path.dt
    n_dof = ops.n_dof
    if with_q1 is None:
        with_q1 = not model.sigma_is_additive
    pathwise = z2 is None
    z2 = np.empty((n, model.obs_dim)) if pathwise else np.array(z2, dtype=np.float64)

    p = np.empty((n + 1, n_dof))
    p_bar = np.empty((n, n_dof))
    q2 = np.empty((n, model.obs_dim, n_dof))
    q1 = np.empty((n, model.n_noise_modes, n_dof)) if with_q1 else None
    p[n] = apply_nemytskii(model.m.dx, path.states[n])

    for k in range(n - 1, -1, -1):
        x = path.states[k]
        u = path.controls[k]
        transported = fem.adjoint_transport(p[k + 1], ops)
        p_bar[k] = transported
        q2[k] = transported * (path.dB[k] / dt)[:, None]
        if pathwise:
            z2[k] = pathwise_z2(model, x, transported, ops)

        drift = apply_nemytskii(model.b.dx, x, u) * transported
        if with_q1:
            q1[k] = transported * (path.dW[k] / dt)[:, None]
            sigma_x = np.stack([s.dx(x, None) for s in model.sigma])
            drift += np.sum(sigma_x * model.noise_modes * q1[k], axis=0)
        drift += np.sum(g_derivative_fields(model, x) * q2[k], axis=0)
        r_x, _ = observation_gradient(model, x, u, ops)
        drift += z2[k] @ fem.dual_to_field(ops.mass_apply(r_x), ops)
        drift -= correction_term(model, x, g_fields(model, x), r_x, transported, ops, hxp_mode)
        drift += apply_nemytskii(model.ell.dx, x, u)

        p[k] = transported + dt * drift
        if not np.all(np.isfinite(p[k])):
            raise BlowUpError(path.start + k, what="adjoint")
    return p, p_bar, q1, q2, z2


def solve_adjoint(path: StatePath, model: ModelSpec, ops: fem.FemOperators, hxp_mode: str = "transposed",
                  z2_estimator: str = "pathwise", baseline: Optional[ArrayLike] = None) -> AdjointPath:
    """
    BSDE first (its z2 feeds the BSPDE unless the estimator is pathwise),
    then the BSPDE.

    Args:
        baseline: cost-to-go baseline on the path nodes, used by the
            "baseline" estimator only
    """
    _check_choice(z2_estimator, Z2_ESTIMATORS, "z2_estimator")
    z, z1, z2 = solve_bsde_z(path, model, ops, baseline if z2_estimator == "baseline" else None)
    p, p_bar, q1, q2, z2 = solve_bspde_p(path, None if z2_estimator == "pathwise" else z2, model, ops, hxp_mode)
    return AdjointPath(p=p, p_bar=p_bar, q1=q1, q2=q2, z=z, z1=z1, z2=z2)


def hamiltonian(model: ModelSpec, x: ArrayLike, u: ArrayLike, p: ArrayLike,
                q1: Optional[ArrayLike], q2: Optional[ArrayLike], z2: Optional[ArrayLike],
                ops: fem.FemOperators) -> float:
    """
    H = <p, b - g^j h^j> + sum_i <q1^i, sigma^i e_i> + sum_j <q2^j, g^j> + L(x, u) + z2 . h(x, u)

    b - g^j h^j is the drift of the observation-driven state equation, so the
    x-derivative of H carries the g h_x p term of the adjoint and the
    u-derivative the matching g h_u p term. All field pairings are
    mass-matrix quadratures of the pointwise product.
    """
    x = ops.check(x)
    u = ops.check(u)
    p = ops.check(p)
    h = observe(model, x, u, ops)
    value = fem.quadrature_pairing(p, apply_nemytskii(model.b.value, x, u), ops)
    value -= float(np.dot(h, fem.quadrature_pairing(g_fields(model, x), p, ops)))
    if q1 is not None:
        sigma = np.stack([s.value(x, None) for s in model.sigma]) * model.noise_modes
        value += float(np.sum(fem.quadrature_pairing(q1, sigma, ops)))
    if q2 is not None:
        value += float(np.sum(fem.quadrature_pairing(q2, g_fields(model, x), ops)))
    value += running_cost(model, x, u, ops)
    if z2 is not None:
        value += float(np.dot(z2, h))
    return float(value)


def hamiltonian_gradient_u(model: ModelSpec, x: ArrayLike, u: ArrayLike, p: ArrayLike,
                           z2: ArrayLike, ops: fem.FemOperators) -> NDArray[np.float64]:
    """
    psi = b_u p + ell_u + sum_j (z2^j - <g^j, p>_w) (h_u^j as a field), the
    gradient of H in u with respect to the quadrature pairing (sigma and g
    do not depend on u). Accepts a leading batch axis on x, p and z2.

    With pathwise z2 the observation part vanishes identically.
    """
    x = ops.check(x)
    u = ops.check(u)
    p = ops.check(p)
    psi = apply_nemytskii(model.b.du, x, u) * p + apply_nemytskii(model.ell.du, x, u)
    _, r_u = observation_gradient(model, x, u, ops)
    r_u_fields = fem.dual_to_field(ops.mass_apply(r_u), ops)
    weights = np.asarray(z2, dtype=np.float64) - pathwise_z2(model, x, p, ops)
    return psi + np.einsum("...j,...jn->...n", weights, r_u_fields)


def pontryagin_residual(model: ModelSpec, x: ArrayLike, u_hat: ArrayLike, candidates: Sequence[ArrayLike],
                        p: ArrayLike, z2: ArrayLike, ops: fem.FemOperators,
                        weights: Optional[ArrayLike] = None) -> float:
    """
    min over candidates v of <E[grad_u H], v - u_hat>.

    x, p and z2 may carry a leading sample axis; the conditional
    expectation is then the (optionally weighted) sample mean.
    """
    if len(candidates) == 0:
        raise ShapeError("pontryagin_residual needs at least one candidate control")
    u_hat = ops.check(u_hat)
    psi = hamiltonian_gradient_u(model, x, u_hat, p, z2, ops)
    if psi.ndim > 1:
        psi = np.average(psi.reshape(-1, ops.n_dof), axis=0, weights=weights)
    return float(min(fem.quadrature_pairing(psi, ops.check(v) - u_hat, ops) for v in candidates))


def summary_rows(path: StatePath, adjoint: AdjointPath, ops: fem.FemOperators):
    """(t, |p_t|, z_t, z2_t...) per node, for the optional adjoint dump"""
    rows = []
    for k in range(path.n_steps + 1):
        z2 = adjoint.z2[k] if k < path.n_steps else np.zeros(adjoint.z2.shape[-1])
        rows.append([(path.start + k) * path.dt, fem.l2_norm(adjoint.p[k], ops), adjoint.z[k], *z2])
    return rows
