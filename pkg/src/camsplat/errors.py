"""Exception hierarchy shared by every module.

Three error surfaces exist, and the CLI maps each to a distinct exit code:
contract violations (bad shapes, bad arguments, bad state transitions),
I/O problems (missing or unreadable files, which reuse builtin OSError),
and numeric failures (NaN/Inf where finite values are required).
"""


class CamsplatError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(CamsplatError):
    """An argument, shape, or state violates a documented precondition."""


class ShapeError(ContractError):
    """Array shape or divisibility requirement not met."""


class FormatError(ContractError):
    """A file or string does not parse under its documented format."""


class StateError(ContractError):
    """Operation attempted in an invalid order (e.g. stage gating)."""


class NumericError(CamsplatError):
    """NaN or Inf encountered where a finite value is required."""
