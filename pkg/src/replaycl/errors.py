"""Exception types shared across the package."""


class ReplayClError(Exception):
    """Base class for all package errors."""


class InvalidInput(ReplayClError, ValueError):
    pass


class InvalidState(ReplayClError, RuntimeError):
    pass


class NumericalError(ReplayClError, ArithmeticError):
    pass


class ParseError(ReplayClError, ValueError):
    """Malformed CSV input; ``row`` and ``col`` locate the offending cell (1-based)."""

    def __init__(self, message, row=None, col=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if col is not None:
            loc.append(f"col {col}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.row = row
        self.col = col


class FormatError(ReplayClError, ValueError):
    """Unreadable, corrupt or wrongly versioned checkpoint file."""
