"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""

from __future__ import annotations


class QlensError(Exception):
    exit_code = 1


class InvalidParameterError(QlensError, ValueError):
    """A configuration or argument value is out of its valid domain."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"invalid {field}: {message}")


class ShapeMismatchError(QlensError, ValueError):
    def __init__(self, a, b):
        self.shapes = (tuple(a), tuple(b))
        super().__init__(f"shape mismatch: {tuple(a)} vs {tuple(b)}")


class InputError(QlensError):
    exit_code = 2


class EmptyInputError(InputError, ValueError):
    def __init__(self, message: str = "empty input"):
        super().__init__(message)


class NonFiniteError(InputError, ValueError):
    def __init__(self, message: str = "non-finite value in input"):
        super().__init__(message)


class BadMagicError(InputError):
    def __init__(self, found: bytes, expected: bytes):
        super().__init__(f"bad magic: expected {expected!r}, found {found!r}")


class BadVersionError(InputError):
    def __init__(self, found: int, expected: int = 1):
        super().__init__(f"unsupported version {found} (expected {expected})")


class BadHeaderError(InputError):
    pass


class TruncatedFileError(InputError):
    def __init__(self, what: str = "payload"):
        super().__init__(f"unexpected end of file while reading {what}")


class NumericalError(QlensError):
    exit_code = 3


class DegeneratePerturbationError(NumericalError):
    def __init__(self):
        super().__init__("degenerate raw draw: zero perturbation cannot be rescaled to a nonzero target")


class DivergenceError(NumericalError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"training diverged (non-finite loss) at step {step}")
