"""Exception types shared across the package."""


class CvmError(Exception):
    """Base class for all package errors."""


class DimensionError(CvmError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigError(CvmError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class ContractError(CvmError, RuntimeError):
    """An operation was called outside its contract (wrong mode, wrong split, ...)."""


class LabelError(CvmError, ValueError):
    """Class label outside [0, num_classes)."""


class PrecisionError(CvmError, TypeError):
    """fp16 storage tensors cannot take part in computation."""


class DataError(CvmError, OSError):
    """Dataset layout or image decoding problem."""


class NumericalError(CvmError, FloatingPointError):
    """Non-finite loss or activations during training."""
