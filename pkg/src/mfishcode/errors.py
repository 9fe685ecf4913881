"""Exception types shared across the package."""


class MfishError(Exception):
    """Base class for all package errors."""


class InputError(MfishError):
    """Invalid user input, file content, or argument combination."""


class NumericalError(MfishError):
    """A numerical procedure failed to produce a usable result."""


class DegenerateRoundError(NumericalError):
    """An imaging round where no molecule (or every molecule) lights up."""
