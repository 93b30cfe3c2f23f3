"""Exception hierarchy shared by every module."""


class DifftestError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(DifftestError, ValueError):
    """S(x, alpha) is not positive definite at an evaluated point."""


class NonFinite(DifftestError, ArithmeticError):
    """A computation produced a non-finite value (diverging path, bad stencil)."""


class UnequalSpacing(DifftestError, ValueError):
    """Observation times are not strictly increasing and equally spaced."""


class MalformedRow(DifftestError, ValueError):
    """A path file row could not be parsed."""


class AllStartsFailed(DifftestError, RuntimeError):
    """Every multi-start optimization run failed."""


class OptimizerInconsistency(DifftestError, RuntimeError):
    """A test statistic is negative beyond tolerance, signalling a failed fit."""


class MissingInvariantDensity(DifftestError, ValueError):
    """An operation needs the model's invariant density but none is supplied."""


class ConfigError(DifftestError, ValueError):
    """Invalid model, hypothesis or experiment configuration."""


class ExperimentAborted(DifftestError, RuntimeError):
    """Too many replications failed for the experiment to be meaningful."""
