"""Exception hierarchy shared across the package.

Every failure mode that callers are expected to distinguish gets its own
class; the CLI maps these onto process exit codes (config 3, data 4,
numerical 5).
"""


class XrayMimError(Exception):
    """Base class for all package errors."""


class ShapeError(XrayMimError):
    """Operands have incompatible or malformed shapes."""


class NumericalError(XrayMimError):
    """A computation produced NaN or Inf, or diverged."""


class ConfigError(XrayMimError):
    """A run configuration is malformed or out of range."""


class DataError(XrayMimError):
    """A dataset, manifest, or stored artifact is unusable."""


class ManifestError(DataError):
    """A CSV manifest is malformed or references missing files."""


class ImageDecodeError(DataError):
    """An image file cannot be decoded under the supported formats."""


class CheckpointError(DataError):
    """A checkpoint file violates the serialization contract."""


class BadMagicError(CheckpointError):
    """Checkpoint does not start with the expected magic bytes."""


class FormatVersionError(CheckpointError):
    """Checkpoint declares an unsupported format version."""


class TruncatedFileError(CheckpointError):
    """Checkpoint file ends before its declared payload does."""


class IntegrityError(CheckpointError):
    """Checkpoint metadata is inconsistent with its payload."""


class UndefinedMetricError(XrayMimError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""
