"""
P1 finite-element discretization of the interval (0, L) with homogeneous
Dirichlet boundary conditions.

Fields are plain numpy arrays of nodal values on the interior nodes; a
leading batch axis (particles, modes, time) is allowed everywhere and all
operators act on the last axis.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import sparse
from scipy.linalg import cho_solve_banded, cholesky_banded

from errors import ConfigurationError, FieldError, ShapeError

logger = logging.getLogger(__name__)

Field = NDArray[np.float64]


@dataclass(frozen=True)
class Mesh1D:
    """Uniform mesh of [0, length] with n_elems elements"""

    length: float
    n_elems: int

    @property
    def h(self) -> float:
        return self.length / self.n_elems

    @property
    def n_dof(self) -> int:
        # boundary nodes are pinned to zero
        return self.n_elems - 1

    @property
    def node_coords(self) -> NDArray[np.float64]:
        return np.linspace(0.0, self.length, self.n_elems + 1)

    @property
    def interior_coords(self) -> NDArray[np.float64]:
        return self.node_coords[1:-1]


@dataclass(frozen=True, eq=False)
class FemOperators:
    """
    Assembled mass and stiffness operators plus the factorization of
    (M + dt*A) for the stored time step. Immutable after assembly.
    """

    mesh: Mesh1D
    dt: float
    mass_diag: NDArray[np.float64]
    mass_off: NDArray[np.float64]
    stiffness_diag: NDArray[np.float64]
    stiffness_off: NDArray[np.float64]
    weights: NDArray[np.float64]
    implicit_factor: NDArray[np.float64] = field(repr=False)

    @property
    def n_dof(self) -> int:
        return self.mesh.n_dof

    @property
    def mass(self) -> sparse.csr_matrix:
        return _tridiagonal_matrix(self.mass_diag, self.mass_off)

    @property
    def stiffness(self) -> sparse.csr_matrix:
        return _tridiagonal_matrix(self.stiffness_diag, self.stiffness_off)

    def mass_apply(self, values: ArrayLike) -> NDArray[np.float64]:
        """M @ v along the last axis"""
        return _tridiagonal_apply(self.mass_diag, self.mass_off, self.check(values))

    def stiffness_apply(self, values: ArrayLike) -> NDArray[np.float64]:
        """A @ v along the last axis"""
        return _tridiagonal_apply(self.stiffness_diag, self.stiffness_off, self.check(values))

    def implicit_apply(self, values: ArrayLike) -> NDArray[np.float64]:
        """(M + dt*A) @ v along the last axis"""
        v = self.check(values)
        return self.mass_apply(v) + self.dt * self.stiffness_apply(v)

    def check(self, values: ArrayLike) -> NDArray[np.float64]:
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 0 or v.shape[-1] != self.n_dof:
            raise ShapeError(f"expected trailing dimension {self.n_dof}, got shape {v.shape}")
        return v


def _tridiagonal_apply(diag: NDArray, off: NDArray, v: NDArray) -> NDArray[np.float64]:
    out = diag * v
    if off.size:
        out[..., 1:] += off * v[..., :-1]
        out[..., :-1] += off * v[..., 1:]
    return out


def _tridiagonal_matrix(diag: NDArray, off: NDArray) -> sparse.csr_matrix:
    n = diag.size
    if n == 1:
        return sparse.csr_matrix(diag.reshape(1, 1))
    return sparse.diags([off, diag, off], [-1, 0, 1], shape=(n, n), format="csr")


def assemble(length: float, n_elems: int, dt: float,
             diffusivity: Optional[Callable[[NDArray], NDArray]] = None) -> FemOperators:
    """
    Assemble the P1 mass and stiffness operators on a uniform mesh and
    factor M + dt*A once.

    Args:
        length: Domain length L > 0
        n_elems: Number of elements, at least 2
        dt: Time step used by the implicit solve
        diffusivity: Optional coefficient a(lambda) >= a0 > 0 of the
            divergence-form operator; evaluated at element midpoints.
            Defaults to the Laplacian (a = 1).

    Returns:
        FemOperators for the mesh and time step
    """
    if not length > 0:
        raise ConfigurationError(f"domain length must be positive, got {length}", key="length")
    if int(n_elems) != n_elems or n_elems < 2:
        raise ConfigurationError(f"need at least 2 elements, got {n_elems}", key="n_elems")
    if not dt > 0:
        raise ConfigurationError(f"time step must be positive, got {dt}", key="dt")

    mesh = Mesh1D(float(length), int(n_elems))
    h = mesh.h
    n = mesh.n_dof

    if diffusivity is None:
        coeff = np.ones(mesh.n_elems)
    else:
        midpoints = 0.5 * (mesh.node_coords[:-1] + mesh.node_coords[1:])
        coeff = np.asarray(diffusivity(midpoints), dtype=np.float64) * np.ones(mesh.n_elems)
        if np.any(~np.isfinite(coeff)) or np.any(coeff <= 0):
            raise ConfigurationError("diffusivity must be finite and strictly positive", key="diffusivity")

    mass_diag = np.full(n, 2.0 * h / 3.0)
    mass_off = np.full(n - 1, h / 6.0)
    # interior node i touches elements i-1 and i
    stiffness_diag = (coeff[:-1] + coeff[1:]) / h
    stiffness_off = -coeff[1:-1] / h

    weights = _tridiagonal_apply(mass_diag, mass_off, np.ones(n))

    banded = np.zeros((2, n))
    banded[1] = mass_diag + dt * stiffness_diag
    banded[0, 1:] = mass_off + dt * stiffness_off
    factor = cholesky_banded(banded, lower=False)

    logger.debug("assembled P1 operators: L=%g, n_elems=%d, dt=%g", length, n_elems, dt)
    return FemOperators(
        mesh=mesh, dt=float(dt),
        mass_diag=mass_diag, mass_off=mass_off,
        stiffness_diag=stiffness_diag, stiffness_off=stiffness_off,
        weights=weights, implicit_factor=factor,
    )


def make_field(values: ArrayLike, ops: Union[FemOperators, Mesh1D]) -> Field:
    """Validate nodal values as a field on the given mesh"""
    n_dof = ops.n_dof
    v = np.array(values, dtype=np.float64)
    if v.ndim == 0:
        v = np.full(n_dof, float(v))
    if v.shape[-1] != n_dof:
        raise ShapeError(f"field needs {n_dof} nodal values, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise FieldError("field has non-finite nodal values")
    return v


def interpolate(func: Callable[[NDArray], ArrayLike], ops: Union[FemOperators, Mesh1D]) -> Field:
    """Nodal interpolant of func on the interior nodes"""
    mesh = ops.mesh if isinstance(ops, FemOperators) else ops
    return make_field(func(mesh.interior_coords), mesh)


def inner_product(a: ArrayLike, b: ArrayLike, ops: FemOperators) -> Union[float, NDArray]:
    """Discrete L2 pairing a^T M b (batched over leading axes)"""
    a = ops.check(a)
    b = ops.check(b)
    result = np.sum(a * ops.mass_apply(b), axis=-1)
    return float(result) if np.ndim(result) == 0 else result


def l2_norm(a: ArrayLike, ops: FemOperators) -> Union[float, NDArray]:
    return np.sqrt(inner_product(a, a, ops))


def quadrature(values: ArrayLike, ops: FemOperators) -> Union[float, NDArray]:
    """Mass-matrix quadrature 1^T M f of nodal integrand values"""
    result = ops.check(values) @ ops.weights
    return float(result) if np.ndim(result) == 0 else result


def quadrature_pairing(a: ArrayLike, b: ArrayLike, ops: FemOperators) -> Union[float, NDArray]:
    """Quadrature of the pointwise product a*b; the pairing adjoints live in"""
    return quadrature(ops.check(a) * ops.check(b), ops)


def dual_to_field(dual: ArrayLike, ops: FemOperators) -> NDArray[np.float64]:
    """Field whose quadrature pairing reproduces the dual vector"""
    return ops.check(dual) / ops.weights


def solve_implicit(rhs: ArrayLike, ops: FemOperators) -> NDArray[np.float64]:
    """Solve (M + dt*A) x = rhs along the last axis"""
    r = ops.check(rhs)
    flat = r.reshape(-1, ops.n_dof).T
    x = cho_solve_banded((ops.implicit_factor, False), flat, check_finite=False)
    return x.T.reshape(r.shape)


def implicit_step(source: ArrayLike, ops: FemOperators) -> NDArray[np.float64]:
    """x_{k+1} with (M + dt*A) x_{k+1} = M source"""
    return solve_implicit(ops.mass_apply(source), ops)


def adjoint_transport(p: ArrayLike, ops: FemOperators) -> NDArray[np.float64]:
    """
    Transpose of implicit_step in the quadrature pairing:
    W^{-1} M (M + dt*A)^{-1} W p, so that
    quadrature_pairing(adjoint_transport(p), v) == quadrature_pairing(p, implicit_step(v)).
    """
    w = ops.weights
    return ops.mass_apply(solve_implicit(w * ops.check(p), ops)) / w
