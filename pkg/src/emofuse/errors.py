"""Exception types shared across the package."""


class EmofuseError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(EmofuseError, ValueError):
    """Operands have incompatible shapes."""


class ParameterError(EmofuseError, ValueError):
    """An operation parameter is out of its valid range."""


class EmptySequenceError(EmofuseError, ValueError):
    """A time axis of length zero where at least one frame is required."""


class DegenerateVectorError(EmofuseError, ValueError):
    """A vector too close to zero to normalize."""


class ContractError(EmofuseError, ValueError):
    """A caller violated an API contract (non-scalar loss, wrong dtype, ...)."""


class LabelError(EmofuseError, ValueError):
    """A class id outside the configured label range."""


class FormatError(EmofuseError, ValueError):
    """Base class for feature/checkpoint file format violations."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File format version not supported."""


class DtypeError(FormatError):
    """File declares a payload dtype other than float32."""


class TruncatedError(FormatError):
    """File payload shorter than its header promises."""


class MissingClassError(EmofuseError, ValueError):
    """A class id has no samples where every class is required."""


class DataError(EmofuseError, ValueError):
    """Dataset-level inconsistency (missing files, bad manifests, ...)."""


class ConfigError(EmofuseError, ValueError):
    """Invalid or unknown configuration values."""


class DivergenceError(EmofuseError, RuntimeError):
    """Training produced NaN losses or gradients."""
