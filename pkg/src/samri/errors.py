"""Exception types shared across the package."""


class SamriError(Exception):
    """Base class for all package-specific errors."""


# ---- file parsing / volume IO ----

class TruncatedFile(SamriError):
    pass


class BadMagic(SamriError):
    pass


class UnsupportedDatatype(SamriError):
    pass


class UnsupportedDim(SamriError):
    pass


class CompressedNotSupported(SamriError):
    pass


class ValueOutOfRange(SamriError):
    pass


class SpecInfeasible(SamriError):
    pass


class DimMismatch(SamriError):
    pass


# ---- preprocessing / prompts ----

class NonFiniteInput(SamriError):
    pass


class EmptyMask(SamriError):
    pass


class OutOfBounds(SamriError):
    pass


# ---- tensor / model ----

class ShapeMismatch(SamriError):
    pass


class NonFiniteLoss(SamriError):
    pass


class NonFiniteGradient(SamriError):
    pass


# ---- metrics / stats ----

class EmptySurface(SamriError):
    pass


class AllZeroDifferences(SamriError):
    pass


# ---- embedding bank / checkpoints ----

class IoError(SamriError):
    pass


class ChecksumMismatch(SamriError):
    pass


class KeyNotFound(SamriError):
    pass


class BankMissing(SamriError):
    pass


# ---- evaluation ----

class KeyMismatch(SamriError):
    pass
