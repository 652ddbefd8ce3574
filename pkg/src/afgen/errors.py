"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input lies outside the domain of an operation (e.g. zero probabilities)."""


class GuardError(ValueError):
    """Dense state space too large for the brute-force oracle."""


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or infinite values.

    ``where`` carries the offending layer index, batch index or step,
    whichever applies.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class IntegrationError(RuntimeError):
    """Adaptive integration failed (step budget exhausted or step underflow)."""

    def __init__(self, message, t=None, index=None):
        super().__init__(message)
        self.t = t
        self.index = index
