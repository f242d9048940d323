"""Exception types shared across the package.

The CLI maps these onto exit codes: config/usage problems exit 2,
numeric failures exit 3, verification failures exit 1.
"""


class WbnError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(WbnError, ValueError):
    """Operands have incompatible shapes."""


class NumericError(WbnError, ArithmeticError):
    """A computation produced or received non-finite values."""


class GraphError(WbnError, RuntimeError):
    """Autodiff graph misuse: non-scalar backward root or a consumed graph."""


class ConstraintError(WbnError, ValueError):
    """A value violates a documented precondition (weights, labels, indices)."""


class ContractError(WbnError, ValueError):
    """A required input is missing or an call is out of sequence."""


class ConfigError(WbnError, ValueError):
    """An experiment or model configuration is invalid."""


class FormatError(WbnError, ValueError):
    """A serialized file is malformed; the message includes the byte offset."""


class VersionError(FormatError):
    """A serialized file has an unsupported format version."""
