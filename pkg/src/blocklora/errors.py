"""Exception hierarchy shared by every module of the package."""


class BlockLoRAError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(BlockLoRAError, ValueError):
    pass


class DivisibilityError(BlockLoRAError, ValueError):
    """Raised when the block count does not divide the rank."""

    def __init__(self, r: int, n: int):
        super().__init__(f"block count n={n} must divide rank r={r}")
        self.r = r
        self.n = n


class ConfigError(BlockLoRAError, ValueError):
    pass


class StateError(BlockLoRAError, RuntimeError):
    """Merge/unmerge called in the wrong state."""


class FormatError(BlockLoRAError, ValueError):
    """Malformed adapter checkpoint."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DegenerateEmbeddingError(BlockLoRAError, ValueError):
    pass


class LabelError(BlockLoRAError, ValueError):
    pass


class RangeError(BlockLoRAError, ValueError):
    pass


class NumericError(BlockLoRAError, ArithmeticError):
    """A public operation produced NaN or Inf."""


class TruncatedError(FormatError, OSError):
    """Checkpoint ended before the declared payload (an I/O and a format failure)."""

    def __init__(self, message: str):
        FormatError.__init__(self, "payload", message)
