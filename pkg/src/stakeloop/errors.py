"""Exception types shared across the package."""


class StakeloopError(Exception):
    """Base class for every error raised by this package."""


class DomainError(StakeloopError, ValueError):
    """An input is outside the domain an operation is defined on."""


class LiquidityExceededError(DomainError):
    """A borrow amount would push pool utilization above one."""


class ConstraintError(DomainError):
    """A position or allocation violates a market constraint."""


class InsolventPositionError(ConstraintError):
    """Debt meets or exceeds collateral, so leverage is undefined."""


class UnsupportedModelError(StakeloopError, TypeError):
    """An operation received an interest rate model it cannot handle."""


class DataError(StakeloopError):
    """A dataset could not be fetched, parsed, or written."""


class ValidationError(DataError):
    """A dataset parsed but violates a series invariant.

    ``records`` lists human-readable descriptions of the offending rows.
    """

    def __init__(self, message: str, records: list[str] | None = None):
        super().__init__(message)
        self.records = records or []
