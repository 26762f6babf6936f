"""Exception hierarchy shared by every module of the toolkit."""


class MMTError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ShapeError(MMTError, ValueError):
    exit_code = 2


class MaskError(MMTError, ValueError):
    """A softmax row or source sentence has no unmasked entry."""

    exit_code = 3


class VocabError(MMTError, IndexError):
    exit_code = 3


class DataError(MMTError, ValueError):
    exit_code = 3


class FormatError(MMTError, ValueError):
    """A file does not follow its declared on-disk format."""

    exit_code = 4


class DegenerateMassError(MMTError, ValueError):
    """A representation has (near) zero L1 norm, so its mass is undefined."""

    exit_code = 5


class NumericsError(MMTError, FloatingPointError):
    exit_code = 5


class AutodiffError(MMTError, RuntimeError):
    """Misuse of the tape, e.g. running backward twice without a reset."""
