"""Exception hierarchy for the centralshift package."""

from __future__ import annotations


class CentralShiftError(Exception):
    """Base class for all package-specific errors."""


class SingularPointError(CentralShiftError):
    """The vector field vanishes (or nearly vanishes) at the requested point."""


class ChartDomainError(CentralShiftError):
    """A point lies outside the domain of a flowbox chart."""


class InjectivityError(CentralShiftError):
    """A flowbox of the requested radius would self-intersect."""


class MoserSolveError(CentralShiftError):
    """The prescribed-Jacobian (Moser) solver failed to meet its tolerance."""


class PerturbationConditionError(CentralShiftError):
    """One of the perturbation conditions (i)-(iv) failed beyond tolerance."""

    def __init__(self, failures: list[str], report=None):
        self.failures = list(failures)
        self.report = report
        super().__init__("perturbation conditions failed: " + "; ".join(self.failures))


class HorizonError(CentralShiftError):
    """A finite-horizon estimate is too short to resolve the requested quantity."""


class ComparisonError(CentralShiftError):
    """The comparison cocycle could not be evaluated reliably.

    Raised for unresolved unstable directions, return events too close to
    the flowbox shell for floating-point classification, near-vanishing
    denominators in the correction factor, and cross-check disagreements.
    """


class ExperimentError(CentralShiftError):
    """An experiment aborted because a sub-verification failed."""

    def __init__(self, failed_invariant: str, details: dict | None = None):
        self.failed_invariant = failed_invariant
        self.details = dict(details or {})
        super().__init__(f"experiment invariant failed: {failed_invariant}")
