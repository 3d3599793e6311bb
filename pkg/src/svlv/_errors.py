"""Exception types shared by both simulation backends."""


class BudgetError(RuntimeError):
    """Raised when a run exceeds its event budget."""


class PositivityError(ValueError):
    """Raised when a configuration produces a negative flip rate."""


class DominationError(RuntimeError):
    """Raised when a coupled run breaks the process ordering."""


class EngineError(RuntimeError):
    """Raised for structural engine failures (coordinate bounds etc.)."""
