"""Exception hierarchy shared by the codec, trainer and CLI."""


class TGICError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class InputError(TGICError):
    exit_code = 3


class FormatError(TGICError):
    """Malformed, truncated, tampered or foreign bitstream."""

    exit_code = 4


class DecodingError(FormatError):
    pass


class EncodingError(TGICError):
    exit_code = 4


class ConfigurationError(TGICError):
    exit_code = 5


class VersionError(ConfigurationError):
    """Checkpoint written by an incompatible format version or architecture."""


class NumericError(TGICError):
    exit_code = 6


class TrainingError(NumericError):
    pass
