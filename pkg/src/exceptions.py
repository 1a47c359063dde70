"""
Exception hierarchy.
Every error carries the CLI exit code it maps to.
"""


class SuperflowError(Exception):
    """Base class for toolkit errors."""

    exit_code = 1


class ConfigError(SuperflowError):
    """Unparseable or invalid configuration (usage error)."""

    exit_code = 64


class DomainError(SuperflowError):
    """Grid or point outside the operator's domain."""


class PositivityError(SuperflowError):
    """A weight that must be strictly positive is not."""


class CoefficientError(SuperflowError):
    """A coefficient evaluated to an inadmissible value."""


class ConvergenceError(SuperflowError):
    """An iterative solver did not converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class DiscretizationError(SuperflowError):
    """The grid is too coarse for the requested computation."""


class InsufficientDataError(SuperflowError):
    """Not enough inputs to reach a conclusion."""


class SolverError(SuperflowError):
    """A PDE solve failed (bad step, blow-up, lost positivity)."""


class TruncationError(SolverError):
    """Nested truncations disagree beyond tolerance."""


class ParameterError(SuperflowError):
    """No admissible offspring law for the requested moments."""


class ExplosionError(SuperflowError):
    """Particle population exceeded the configured cap."""


class TestFunctionError(SuperflowError):
    """Test function is inadmissible (e.g. vanishing expected mass)."""

    __test__ = False


class StatisticalPowerError(SuperflowError):
    """Too few samples to support a verdict."""


class RegimeError(SuperflowError):
    """A hypothesis of the limit theorem fails; the experiment refuses to run."""

    exit_code = 3

    def __init__(self, hypothesis: str, detail: str = ""):
        message = f"hypothesis violated: {hypothesis}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.hypothesis = hypothesis
