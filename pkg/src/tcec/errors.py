"""Exception types shared across the package."""


class TcecError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TcecError, ValueError):
    pass


class ScheduleError(TcecError, ValueError):
    pass


class ConfigError(TcecError, ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class IdenticalInputs(TcecError, ArithmeticError):
    """Raised by psnr when the two latents are identical (mse == 0)."""


class DegenerateCache(TcecError, ValueError):
    pass


class MissingRow(TcecError, KeyError):
    pass


class NumericalAbort(TcecError, FloatingPointError):
    """Non-finite values appeared mid-trajectory (CLI exit code 3)."""

    def __init__(self, step_index, t):
        super().__init__(f"non-finite state at step {step_index} (t={t})")
        self.step_index = step_index
        self.t = t
