"""Branching Brownian motion: simulation, Gibbs overlaps and the limiting extremal process."""
from .errors import DomainError, MemoryBudgetError, SamplerBudgetError
from .stochastic_kit import BETA_C, SQRT2, RngStream

__version__ = "0.1.0"

__all__ = ["BETA_C", "SQRT2", "DomainError", "MemoryBudgetError", "RngStream", "SamplerBudgetError"]
