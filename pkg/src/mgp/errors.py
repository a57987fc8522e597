"""Exception types shared across the package.

Each class carries a ``category`` used by the CLI when reporting failures.
"""


class MgpError(Exception):
    category = "error"


class ShapeError(MgpError, ValueError):
    category = "shape error"


class ContractError(MgpError, ValueError):
    category = "contract error"


class NumericError(MgpError, ArithmeticError):
    category = "numeric error"


class ParseError(MgpError, ValueError):
    category = "parse error"


class BadMagicError(ParseError):
    pass


class TruncatedError(ParseError):
    pass


class InconsistentShapeError(ParseError):
    pass


class BadMaxvalError(ParseError):
    pass
