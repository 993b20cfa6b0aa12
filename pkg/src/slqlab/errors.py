"""Exception types shared across the package."""


class SlqError(Exception):
    """Base class for all package-specific failures."""


class DimensionError(SlqError, ValueError):
    """Matrix shapes inconsistent with the declared (n, m, d)."""


class DomainError(SlqError, ValueError):
    """Evaluation requested outside the time or space domain."""


class ConfigurationError(SlqError, ValueError):
    """Malformed config file or solver parameters violating a precondition."""


class SingularWeightError(SlqError, ArithmeticError):
    """Control weighting N + sum(D'KD) is numerically singular.

    Carries the offending smallest eigenvalue in ``eigenvalue``.
    """

    def __init__(self, eigenvalue: float, message: str | None = None):
        self.eigenvalue = float(eigenvalue)
        super().__init__(
            message or f"control weight near-singular: min eigenvalue {eigenvalue:.3e}"
        )


class BlowUpError(SlqError, RuntimeError):
    """Solver or simulation produced a non-finite or structurally invalid state."""
