# errors.py

"""
Exception hierarchy shared by every peakdyn module.

The CLI turns these into exit codes (see peakdyn.main), so library code
raises them and never calls sys.exit itself.
"""


class PeakDynError(Exception):
    """Root of everything this toolkit raises on purpose."""


# ------ INPUT / CONFIG ERRORS ------ #

class DomainError(PeakDynError, ValueError):
    """An argument lies outside the domain of a kernel or operator."""


class ConfigError(PeakDynError):
    """Experiment or simulation configuration is inconsistent."""


class HypothesisViolation(PeakDynError):
    """Initial data do not satisfy the smallness hypotheses of the stability run."""


# ------ NUMERICAL ERRORS ------ #

class NumericalFailure(PeakDynError):
    """Base class for failures of the numerics themselves."""


class RangeError(NumericalFailure):
    """A value left the representable or bracketed range."""


class ConstructionError(NumericalFailure):
    """A stationary profile could not be built (series did not converge)."""


class WindowTooSmall(NumericalFailure):
    """The index window is too narrow for the requested tail tolerance."""


class StepRejected(NumericalFailure):
    """An explicit step would have produced negative cell masses."""


class ModelBreakdown(NumericalFailure):
    """A peak centroid left its interval, so the moment picture no longer applies."""

    def __init__(self, message, n=None, t=None):
        super().__init__(message)
        self.n = n
        self.t = t


class IntegrationError(NumericalFailure):
    """Time integration could not reach the requested tolerance."""


class ValidationFailure(NumericalFailure):
    """A kernel bound was violated; `offending` lists the sample points."""

    def __init__(self, message, offending=None):
        super().__init__(message)
        self.offending = list(offending or [])
