"""Exception hierarchy. Each category carries the CLI exit code it maps to."""


class XaneError(Exception):
    """Base class for all xanelab errors."""

    exit_code = 1


class ConfigError(XaneError, ValueError):
    """Invalid parameters, flags or configuration files."""

    exit_code = 2


class DataError(XaneError):
    """Input data that cannot be used (bad files, silent signals, short utterances)."""

    exit_code = 3


class InvariantError(XaneError):
    """An internal invariant was violated."""

    exit_code = 4


# audio
class UnsupportedFormatError(DataError):
    pass


class CorruptFileError(DataError):
    pass


class SilentInputError(DataError):
    pass


class NonFiniteSamplesError(DataError):
    pass


class EmptyBufferError(DataError):
    pass


class ClippedSignalWarning(UserWarning):
    """Samples outside [-1, 1] were clamped before quantization."""


# rir
class GeometryOutsideRoomError(ConfigError):
    pass


class DurationTooShortError(ConfigError):
    pass


class SamplingFailureError(DataError):
    pass


# acoustic truth
class InsufficientDecayError(DataError):
    pass


# degradation
class SilentSpeechError(SilentInputError):
    pass


class SilentNoiseError(SilentInputError):
    pass


class InvalidBitrateError(ConfigError):
    pass


# dataset synthesis
class InsufficientSpeakersError(DataError):
    pass


class EmptyCleanDirError(DataError):
    pass


class UtteranceTooShortError(DataError):
    pass


class ManifestError(DataError):
    pass


# features / model
class TooShortError(DataError):
    pass


class ShapeMismatchError(DataError):
    pass


class AllTasksMaskedError(InvariantError):
    pass


class VersionMismatchError(DataError):
    pass


class ChecksumMismatchError(DataError):
    pass


# training
class EmptyManifestError(DataError):
    pass


class DivergedLossError(InvariantError):
    pass


class MissingHeadError(ConfigError):
    pass


# evaluation
class DegenerateDataError(DataError):
    pass


class PerplexityTooLargeError(ConfigError):
    pass


class ZeroVectorError(DataError):
    pass
