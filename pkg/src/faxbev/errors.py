"""Exception types shared across the package."""


class FaxBevError(Exception):
    pass


class DimensionError(FaxBevError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(FaxBevError, ValueError):
    """A configuration violates a structural constraint (divisibility, window counts, ...)."""


class UsageError(FaxBevError, RuntimeError):
    pass


class NonFiniteError(FaxBevError, FloatingPointError):
    pass


class FormatError(FaxBevError, ValueError):
    """A binary dump or checkpoint is malformed."""
