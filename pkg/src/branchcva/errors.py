"""Exception hierarchy shared by all solver modules."""

from __future__ import annotations


class BranchCvaError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(BranchCvaError, ValueError):
    """An argument breaks a documented precondition."""


class EvaluationError(BranchCvaError, ArithmeticError):
    """A coefficient field or payoff evaluated to a non-finite value."""


class FitError(BranchCvaError):
    """Polynomial fitting failed (rank deficiency or bound violation)."""


class ExplosionError(BranchCvaError):
    """A branching sample exceeded the particle cap.

    Carries enough context to reproduce the offending sample.
    """

    def __init__(self, message: str, *, sample_index: int | None = None,
                 population: int | None = None, seed: int | None = None):
        super().__init__(message)
        self.sample_index = sample_index
        self.population = population
        self.seed = seed


class BlowUpRefusal(BranchCvaError):
    """The convergence advisory failed and no override was given."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class SolverError(BranchCvaError):
    """A reference solver failed (Picard stall, singular regression, ...)."""


class ConfigError(BranchCvaError):
    """Run configuration failed schema validation.

    ``errors`` holds one human-readable entry per violation.
    """

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors) if errors else "invalid configuration")
        self.errors = list(errors)
