"""Exception hierarchy. The CLI maps InputError to exit 1 and NumericalError to exit 2."""


class ZigzagError(Exception):
    pass


class InputError(ZigzagError, ValueError):
    """Bad shapes, out-of-range values, malformed files."""


class CapacityError(InputError):
    """Problem too large for the requested solver."""


class NumericalError(ZigzagError, ArithmeticError):
    """Non-finite values produced during evaluation."""


class TrainingError(NumericalError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class ConsistencyError(ZigzagError, RuntimeError):
    """A KV-cache store violated its size or content invariants."""
