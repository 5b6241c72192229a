"""Exception hierarchy shared by every module of the package."""


class BevContrastError(ValueError):
    """Base class for all errors raised by ``bevcontrast``."""


class FormatError(BevContrastError):
    """Binary layout is broken (truncated file, bad magic)."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class ParseError(BevContrastError):
    """A text line could not be parsed."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DataError(BevContrastError):
    """Values parsed fine but violate a numerical invariant."""


class ParameterError(BevContrastError):
    """A configuration value is out of its legal range."""


class ShapeError(BevContrastError):
    """Operand shapes are incompatible."""


class ContractError(BevContrastError):
    """A precondition of an operation does not hold."""


class SingularityError(BevContrastError):
    """A transform that must be inverted is (nearly) singular."""


class EmptyInputError(ContractError):
    """An operation that needs at least one point received none."""


class EmptyOverlapError(BevContrastError):
    """No BEV cell is occupied in both aligned grids."""
