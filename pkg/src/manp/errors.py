"""Exception types shared across the solver modules."""


class ManpError(Exception):
    """Base class for solver errors."""


class ConfigError(ManpError):
    """Invalid or inconsistent configuration."""


class GridError(ConfigError):
    """Invalid grid parameters or mismatched field shapes."""


class IncompatibleSource(ManpError):
    """Poisson source is incompatible with a singular boundary condition."""


class NonConvergence(ManpError):
    """Iterative solve hit its iteration cap. Carries the solve report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class LinearSolveFailure(ManpError):
    """Transport linear system solve missed its residual tolerance."""


class MissingHistory(ManpError):
    """A lagged theta strategy was asked to run without history fields."""


class MaxSweepsExceeded(ManpError):
    """Curl-free relaxation hit its sweep cap. Carries the partial field."""

    def __init__(self, message, field=None, sweeps=0):
        super().__init__(message)
        self.field = field
        self.sweeps = sweeps


class DegenerateQuadratic(ManpError):
    """The 1D compatibility loss has no quadratic term (bad configuration)."""


class NewtonDivergence(ManpError):
    """Damped Newton iteration failed to reduce the residual. Carries a log."""

    def __init__(self, message, iterate_log=None):
        super().__init__(message)
        self.iterate_log = iterate_log or []


class NonpositiveConcentration(ManpError):
    """An operation requiring strictly positive concentrations saw c <= 0."""


class MetadataMismatch(ManpError):
    """Two run directories cannot be compared (different scenario/resolution)."""


class StepFailure(ManpError):
    """A sub-operation failed inside a time step. Carries the step index."""

    def __init__(self, step_index, cause):
        super().__init__(f"time step {step_index} failed: {cause}")
        self.step_index = step_index
        self.cause = cause
