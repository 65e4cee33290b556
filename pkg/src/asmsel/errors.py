"""Exception hierarchy shared by all pipeline stages."""


class AsmSelError(Exception):
    """Base class for every error raised by this package."""


class ContractError(AsmSelError, ValueError):
    """Input violates a documented precondition (bad shape, id, config...)."""


class FingerprintMismatch(ContractError):
    """Artifacts produced under different upstream configurations were mixed."""


class AudioFormatError(AsmSelError, OSError):
    """Audio file is unreadable or uses an unsupported encoding."""
