"""
Locex Errors

Exception hierarchy shared by the library, the command-line tool and the
HTTP surface. Everything raised on purpose derives from LocexError so that
entry points can report it without a traceback.
"""

from typing import Optional


class LocexError(Exception):
    """Base class for all errors raised by locex."""


class SchemaError(LocexError, ValueError):
    """A covariate or dataset does not conform to the declared schema."""


class PremetricError(LocexError, ValueError):
    """A premetric specification is invalid."""


class PartitionError(LocexError, ValueError):
    """A block partition is not a partition of the index set."""


class EstimationError(LocexError, ValueError):
    """Invalid inputs to an estimation routine."""


class GeneratorError(LocexError, ValueError):
    """A synthetic generator was given invalid parameters."""


class BudgetExceededError(LocexError):
    """The within-block group is too large to enumerate."""

    def __init__(self, group_order: int, budget: int):
        self.group_order = group_order
        self.budget = budget
        super().__init__(
            f"group has {group_order} permutations, more than the enumeration "
            f"budget of {budget}; use the subsampled test instead"
        )


class InsufficientSamplesError(LocexError):
    """N is too small for alpha_N to be a valid positive level."""

    def __init__(self, alpha_n: float, n_samples: int, required_samples: int):
        self.alpha_n = alpha_n
        self.n_samples = n_samples
        self.required_samples = required_samples
        super().__init__(
            f"N = {n_samples} permutations are too few (alpha_N = {alpha_n:.6g}); "
            f"use at least N = {required_samples}"
        )


class DataError(LocexError, ValueError):
    """A data file could not be ingested."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[str] = None):
        self.line = line
        self.column = column
        location = []
        if line is not None:
            location.append(f"line {line}")
        if column is not None:
            location.append(f"column '{column}'")
        prefix = f"{', '.join(location)}: " if location else ''
        super().__init__(f"{prefix}{message}")
