"""
Error Types

Exceptions raised by library code. The CLI maps ``exit_code`` onto the process
exit status.
"""


class EyeSegError(Exception):
    """Base class for all package errors"""
    exit_code = 1


class ConfigError(EyeSegError, ValueError):
    """Invalid or unknown configuration"""
    exit_code = 2


class LeakageError(EyeSegError, RuntimeError):
    """A test-split sample reached a training or validation batch"""
    exit_code = 3


class IntegrityError(EyeSegError, RuntimeError):
    """On-disk artifact failed a consistency check"""
    exit_code = 3


class MissingInputError(EyeSegError, FileNotFoundError):
    """Required input (results, baseline, registry path) is absent"""
    exit_code = 4


class ShapeError(EyeSegError, ValueError):
    pass


class NormalizationError(EyeSegError, RuntimeError):
    pass


class GeometryError(EyeSegError, ValueError):
    pass


class SynthesisError(EyeSegError, ValueError):
    pass


class AugmentationError(EyeSegError, ValueError):
    pass


class LossError(EyeSegError, ValueError):
    pass


class SplitError(EyeSegError, ValueError):
    pass


class MetricError(EyeSegError, ValueError):
    pass


class TrainingAborted(EyeSegError, RuntimeError):
    """Too many consecutive non-finite losses"""
    pass
