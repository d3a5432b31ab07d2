"""
Errors - Categorized exception hierarchy for NeuroVol
Every failure raised by the library carries a category and a CLI exit code
"""


class NeuroVolError(Exception):
    """Base class for all NeuroVol errors"""

    category = "error"
    exit_code = 4


class InsufficientQuotes(NeuroVolError):
    category = "insufficient-quotes"


class DomainError(NeuroVolError, ValueError):
    category = "domain"


class OutOfBounds(NeuroVolError, ValueError):
    """Option price outside its no-arbitrage bounds"""

    category = "out-of-bounds"


class NoConvergence(NeuroVolError):
    category = "no-convergence"


class CalibrationFailed(NeuroVolError):
    category = "calibration-failed"


class SingularKernel(NeuroVolError):
    category = "singular-kernel"


class ShapeMismatch(NeuroVolError, ValueError):
    category = "shape-mismatch"


class NotScalar(NeuroVolError, ValueError):
    category = "not-scalar"


class LengthMismatch(NeuroVolError, ValueError):
    category = "length-mismatch"


class DataStageMismatch(NeuroVolError):
    """A training stage was given days without the data source it samples from"""

    category = "data-stage-mismatch"


class EmptyAfterFilter(NeuroVolError):
    category = "empty-after-filter"


class ConfigError(NeuroVolError):
    category = "config"
    exit_code = 2


class IoError(NeuroVolError):
    category = "io"
    exit_code = 3
