"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class MemoryBudgetError(RuntimeError):
    """A simulation would exceed the configured node budget."""

    def __init__(self, message, required_nodes=None, budget=None):
        super().__init__(message)
        self.required_nodes = required_nodes
        self.budget = budget


class SamplerBudgetError(RuntimeError):
    """A rejection sampler ran out of attempts."""

    def __init__(self, message, attempts=None, acceptance_rate=None):
        super().__init__(message)
        self.attempts = attempts
        self.acceptance_rate = acceptance_rate
