"""
Errors - one hierarchy for every failure the library and the CLI report
"""

EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_IO = 3


class NasaOccError(Exception):
    code = "error"
    exit_code = EXIT_VALIDATION


class UsageError(NasaOccError):
    code = "usage"
    exit_code = EXIT_USAGE


class InvalidInputError(NasaOccError):
    code = "invalid-input"


class ConfigError(NasaOccError):
    code = "config"


class DegenerateRotationError(NasaOccError):
    code = "degenerate-rotation"


class SamplingExhaustedError(NasaOccError):
    code = "sampling-exhausted"


class UnsupportedModelError(NasaOccError):
    code = "unsupported-model"


class StaleTapeError(NasaOccError):
    code = "stale-tape"


class NonFiniteGradientError(NasaOccError):
    code = "non-finite-gradient"


class TrainingDivergedError(NasaOccError):
    code = "diverged"


class UndefinedMetricError(NasaOccError):
    code = "undefined-metric"


class FormatError(NasaOccError):
    code = "format"
    exit_code = EXIT_IO


class BadMagicError(FormatError):
    code = "bad-magic"


class VersionMismatchError(FormatError):
    code = "version-mismatch"


class TruncatedFileError(FormatError):
    code = "truncated"


class ChecksumError(FormatError):
    code = "checksum"


class PlainIOError(NasaOccError):
    code = "io"
    exit_code = EXIT_IO
