"""Exception hierarchy shared by all modules."""


class BilevelError(Exception):
    """Base class for errors raised by this package."""


class InputError(BilevelError, ValueError):
    """Inconsistent dimensions, constraint violations or malformed inputs."""


class DatasetFormatError(InputError):
    """A dataset file could not be parsed.

    The message names the offending file, line and (when known) column.
    """

    def __init__(self, message, path=None, line=None, column=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if line is not None:
            loc.append(f"line {line}")
        if column is not None:
            loc.append(f"column {column}")
        prefix = ", ".join(loc)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.column = column


class NumericalError(BilevelError, ArithmeticError):
    """A numerical routine failed (non-PD matrix, all weights zero, ...)."""


class ConvergenceError(NumericalError):
    """Newton-Raphson hit its iteration cap.

    Attributes
    ----------
    trace : list of (iteration, h, grad_inf_norm)
    """

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class UnsupportedError(BilevelError):
    """Request outside the supported regime (e.g. quadrature for d > 3)."""


class SamplerError(BilevelError, RuntimeError):
    """The SMC run stopped before reaching lambda = 1."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
