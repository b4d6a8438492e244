"""Exception types shared across the package."""


class GridSwitchError(Exception):
    """Base class for all package errors."""


class ModelError(GridSwitchError, ValueError):
    """Invalid grid model data (bad topology, non-positive parameters)."""


class ScenarioError(GridSwitchError, ValueError):
    """Malformed or inconsistent scenario file.  Message names the field."""


class IntegrationError(GridSwitchError, ArithmeticError):
    """Non-finite state encountered while stepping the dynamics."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class EquilibriumError(GridSwitchError, RuntimeError):
    """Power-flow / equilibrium solve failed or violates angle assumptions."""


class CertificationError(GridSwitchError, RuntimeError):
    """No feasible Lyapunov cross-term weights were found."""


class PoolError(GridSwitchError, ValueError):
    """Controller pool violates the common-integral-gain requirement."""
