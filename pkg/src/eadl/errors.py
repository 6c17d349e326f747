"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: usage errors (1), data/format errors (2),
contract violations (3).
"""


class EadlError(Exception):
    """Base class for all package errors."""


class ShapeError(EadlError):
    """Tensor shapes or dimensions do not line up."""


class ParameterError(EadlError):
    """An operation or config parameter is out of its valid range."""


class InputError(EadlError):
    """Input data violates a documented precondition (bad values, not shapes)."""


class NumericGuardError(EadlError):
    """A numeric guard tripped (zero norm, non-finite value)."""


class LengthError(EadlError):
    """Sequence length exceeds the model's maximum positions."""


class ProtocolError(EadlError):
    """A harness contract was misused (e.g. non-deterministic function
    handed to the gradient checker)."""


class ContractError(EadlError):
    """An internal contract was violated by the caller."""


class FormatError(EadlError):
    """Serialized data could not be decoded. `code` identifies the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
