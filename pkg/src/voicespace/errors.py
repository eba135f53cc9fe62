"""Exception hierarchy.

Contract errors (bad inputs, violated preconditions) map to CLI exit code 1;
format errors (anything wrong with bytes on disk) map to exit code 2.
"""


class VoiceSpaceError(Exception):
    exit_code = 1


class ContractError(VoiceSpaceError, ValueError):
    """A precondition or invariant of an operation was violated."""


class DimensionError(ContractError):
    pass


class ConfigError(ContractError):
    pass


class StagePipelineError(ContractError):
    """A training stage was requested without its prerequisite checkpoint."""


class ValidationError(ContractError):
    pass


class FormatError(VoiceSpaceError):
    exit_code = 2


class LengthError(FormatError):
    pass


class IntegrityError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass
