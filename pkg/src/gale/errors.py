"""Exception types shared across the package."""


class GaleError(Exception):
    """Base class for all package errors."""


class ShapeError(GaleError):
    """Tensor or array dimensions do not conform."""


class InvalidArgumentError(GaleError):
    """An argument is outside its legal range."""


class NumericError(GaleError):
    """Non-finite values where finite ones are required."""


class EmptyInputError(GaleError):
    """An operation that needs at least one row received none."""


class InvalidSampleError(GaleError):
    """A sample violates the model's structural requirements."""


class ConfigError(GaleError):
    """A configuration file or override is invalid."""


class DataError(GaleError):
    """Dataset-level problem: empty split, empty file, impossible spec."""


class SchemaError(DataError):
    """A point-cloud file is missing a required column."""


class ParseError(DataError):
    """A point-cloud file contains a cell that does not parse."""


class DomainError(GaleError):
    """A point lies outside the analytic solution's domain."""


class QuadratureError(GaleError):
    """Surface quadrature violates its invariants (e.g. non-unit normals)."""


class UndefinedMetricError(GaleError):
    """The metric is undefined for the given data (e.g. constant truth)."""


class TrainingError(GaleError):
    """Optimizer/loop-level problem such as a missing gradient."""


class DivergenceError(TrainingError):
    """Training produced a non-finite loss.

    Carries the path of the last good checkpoint when one exists.
    """

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class CheckpointError(GaleError):
    """Base class for checkpoint file problems."""


class CheckpointFormatError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """File has an unsupported format version."""


class CheckpointCorruptionError(CheckpointError):
    """File is truncated or a tensor checksum does not match."""
