"""
Exception hierarchy for the SPDE control solver.
Library modules raise these; only main.py turns them into exit codes.
"""

from typing import Optional


class SolverError(Exception):
    """Base class for every error raised by the solver"""


class ConfigurationError(SolverError, ValueError):
    """Invalid run configuration or invalid construction parameters"""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)


class ShapeError(SolverError, ValueError):
    """Arrays that should live on the same mesh do not"""


class FieldError(SolverError, ValueError):
    """A field holds non-finite nodal values"""


class ModelError(SolverError, ValueError):
    """A model's supplied derivatives disagree with its primitives"""


class BlowUpError(SolverError, FloatingPointError):
    """A time step produced NaN or Inf"""

    def __init__(self, step: int, particle: Optional[int] = None, what: str = "state"):
        self.step = step
        self.particle = particle
        where = f"step {step}"
        if particle is not None:
            where += f", particle {particle}"
        super().__init__(f"{what} blew up at {where}")
