"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class GenerationFailed(RuntimeError):
    pass


class UndefinedDescriptor(ArithmeticError):
    """A descriptor has no value for this structure (e.g. non-percolating phase)."""


class FitFailed(ValueError):
    pass


class UndefinedMetric(ArithmeticError):
    pass


class OracleTooLarge(ValueError):
    pass


class GridFormatError(ValueError):
    pass
