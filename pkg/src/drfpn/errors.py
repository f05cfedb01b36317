"""Exception types raised across the library."""


class DrfpnError(Exception):
    """Base class for all library errors."""


class ShapeError(DrfpnError, ValueError):
    """Tensor shapes are invalid or incompatible for an operation."""


class ContractError(DrfpnError, RuntimeError):
    """A precondition of an operation was violated (non-scalar loss, reused tape, ...)."""


class FormatError(DrfpnError, ValueError):
    """A weight file is malformed or does not match the expected registry."""


class ConfigError(DrfpnError, ValueError):
    """A run configuration is invalid."""
