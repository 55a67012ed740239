"""Error taxonomy shared by the whole package.

ContractError covers violated precondition/shape/format contracts (CLI exit
code 2), NumericError covers non-finite values and other numeric failures
(exit code 3), UsageError covers bad command-line invocations (exit code 1).
"""


class ContractError(ValueError):
    """An API precondition, data contract, or file format was violated."""


class NumericError(ArithmeticError):
    """A numeric operation produced a non-finite or otherwise invalid result."""


class UsageError(Exception):
    """Bad command-line usage."""
