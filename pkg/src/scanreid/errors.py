"""Exception hierarchy shared by every module."""


class ScanError(Exception):
    """Base class for all errors raised by scanreid."""


class DimensionError(ScanError, ValueError):
    """Array shapes do not line up."""


class ContractError(ScanError):
    """A precondition or usage contract was violated."""


class TrainingError(ScanError):
    """Raised when the optimizer meets a non-finite gradient."""


class FeatureFileError(ScanError, IOError):
    """Base for SCNF / checkpoint decoding failures."""


class BadMagicError(FeatureFileError):
    pass


class VersionError(FeatureFileError):
    pass


class TruncatedError(FeatureFileError):
    pass


class ChecksumError(FeatureFileError):
    pass
