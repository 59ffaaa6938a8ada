"""Exception types shared across the toolkit.

The CLI maps :class:`InputError` to exit code 1 and :class:`NumericalError`
to exit code 2, so library code should raise one of these (or a subclass)
rather than a bare ``ValueError`` when the failure is user-facing.
"""


class RetrofitError(Exception):
    """Base class for all toolkit errors."""


class InputError(RetrofitError, ValueError):
    """Malformed or inconsistent input data."""


class ParseError(InputError):
    """A text file could not be parsed; carries the offending line number."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class NumericalError(RetrofitError, ArithmeticError):
    """An optimization step hit a singular, indefinite or non-finite state."""
