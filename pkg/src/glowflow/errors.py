"""Exception hierarchy shared by every glowflow module."""


class GlowError(Exception):
    """Base class; ``exit_code`` is what the CLI returns when it escapes."""

    exit_code = 1


class ShapeError(GlowError, ValueError):
    exit_code = 2


class ArgError(GlowError, ValueError):
    exit_code = 2


class DataError(GlowError):
    exit_code = 3


class NumericsError(GlowError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class SingularError(NumericsError):
    pass


class StateError(GlowError, RuntimeError):
    exit_code = 4


class CostGuardError(GlowError):
    exit_code = 2


class VerificationError(GlowError):
    exit_code = 5
