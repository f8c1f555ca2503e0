"""Exception hierarchy shared across the package."""


class AsotError(Exception):
    """Base class for all errors raised by :mod:`asot`."""


class InvalidArgumentError(AsotError, ValueError):
    """Shapes, ranges or tags that violate an operation's preconditions."""


class InfeasibleError(AsotError, ValueError):
    """Marginals that cannot be coupled (total masses differ)."""


class NumericalError(AsotError, ArithmeticError):
    """NaN or overflow produced inside a solver or training loop."""


class ParseError(AsotError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
