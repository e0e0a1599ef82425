"""Exception types shared across the package.

Each class carries the process exit code the command-line front end maps
it to: 1 for usage/data problems, 2 for broken internal contracts
(including freeze violations), 3 for numeric failures such as NaN loss.
"""


class PointPeftError(Exception):
    exit_code = 1


class UsageError(PointPeftError):
    """Bad flags, malformed config files, unknown methods."""

    exit_code = 1


class DataError(UsageError):
    """Malformed dataset content (bad labels, truncated files)."""


class InfeasibleBudgetError(UsageError):
    """Requested parameter budget below the linear-probe floor."""


class ContractError(PointPeftError):
    """A caller or component violated an internal contract."""

    exit_code = 2


class ShapeError(ContractError):
    """Operand dimensions disagree."""


class FreezeViolation(ContractError):
    """A parameter outside the declared trainable set changed."""


class NumericError(PointPeftError):
    """NaN/Inf contamination detected mid-computation."""

    exit_code = 3
