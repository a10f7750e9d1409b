"""Exception types raised across the package.

Every error the package raises on purpose derives from IcasiftError, so
callers (and the CLI) can distinguish expected failures from bugs.
"""


class IcasiftError(Exception):
    """Base class for all errors raised by icasift."""


class DimensionError(IcasiftError):
    """Tensor shapes are incompatible with the requested operation."""


class ParameterError(IcasiftError):
    """A hyperparameter or argument value is out of its valid range."""


class ContractError(IcasiftError):
    """An API precondition was violated (e.g. non-scalar loss, missing grad)."""


class ConfigError(IcasiftError):
    """A model configuration is unknown or internally inconsistent."""


class DomainMismatchError(IcasiftError):
    """A model was fed inputs from the wrong data domain."""


class DegenerateInputError(IcasiftError):
    """Input is degenerate for the operation (constant series, batch of 1)."""


class LabelError(IcasiftError):
    """A classification label is outside {0, 1}."""


class PartitionError(IcasiftError):
    """Not enough subjects to build the requested train/val/test partition."""


class ProtocolError(IcasiftError):
    """The training protocol cannot proceed (e.g. empty balanced train set)."""


class SchemaError(IcasiftError):
    """A voting schema violates its constraints (weights, model coverage)."""


class EvaluationError(IcasiftError):
    """Evaluation inputs are missing or inconsistent (archives, folds)."""


class ArchiveError(IcasiftError):
    """A parameter archive is malformed or does not match the model."""


class DatasetIOError(IcasiftError):
    """Base class for dataset file errors."""


class FormatError(DatasetIOError):
    """The file is not a dataset file (bad magic bytes or layout)."""


class VersionError(DatasetIOError):
    """The dataset file uses an unsupported format version."""


class TruncatedFileError(DatasetIOError):
    """The dataset file ends before all declared records were read."""


class ChecksumError(DatasetIOError):
    """The dataset file checksum does not match its contents."""
