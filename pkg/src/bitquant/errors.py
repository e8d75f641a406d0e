"""Exception types shared across the package."""


class BitQuantError(Exception):
    pass


class RangeError(BitQuantError, ValueError):
    pass


class ShapeError(BitQuantError, ValueError):
    pass


class AlphabetError(BitQuantError, ValueError):
    pass


class ParameterError(BitQuantError, ValueError):
    pass


class StateError(BitQuantError, RuntimeError):
    pass


class NumericError(BitQuantError, FloatingPointError):
    pass


class FormatError(BitQuantError, ValueError):
    pass


class VersionError(FormatError):
    pass


class ConsistencyError(BitQuantError, ValueError):
    pass


class VerificationError(BitQuantError, RuntimeError):
    pass
