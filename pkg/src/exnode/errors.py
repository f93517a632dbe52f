"""Exception types shared across the package."""


class ExnodeError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(ExnodeError):
    """Operand shapes are incompatible at a named graph node."""


class UnboundInputError(ExnodeError):
    """A graph input was declared or requested without a bound value."""


class BackwardBeforeForwardError(ExnodeError):
    """backward() called on a graph that has never been executed."""


class NonScalarOutputError(ExnodeError):
    """grad_check requires a scalar-valued terminal node."""


class SolverError(ExnodeError):
    """Base class for ODE integration failures."""


class MaxStepsExceeded(SolverError):
    """The adaptive solver ran out of its step budget."""


class NonFiniteDynamics(SolverError):
    """The dynamics returned a non-finite value during integration."""


class TraceBudgetError(ExnodeError):
    """Exact trace requested for a state larger than the configured cap."""


class TrainingDiverged(ExnodeError):
    """A training loop hit its divergence guard."""


class ConfigError(ExnodeError):
    """A run configuration failed validation."""


class CheckpointError(ExnodeError):
    """A parameter checkpoint could not be read or does not match."""
