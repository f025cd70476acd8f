"""Exception types shared across the simulator."""


class BfpError(Exception):
    """Base class for every error raised by this package."""


class NonFiniteInput(BfpError, ValueError):
    pass


class ExponentOverflow(BfpError, OverflowError):
    pass


class LengthMismatch(BfpError, ValueError):
    pass


class DimMismatch(BfpError, ValueError):
    pass


class AccOverflow(BfpError, OverflowError):
    pass


class ChecksumOverflow(BfpError, OverflowError):
    pass


class UnknownSite(BfpError, KeyError):
    pass


class RateTooHigh(BfpError, ValueError):
    pass


class ConfigError(BfpError, ValueError):
    pass
