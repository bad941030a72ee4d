"""Exception types shared across the package."""


class InstanceLabError(Exception):
    """Base class for all package-specific errors."""


class ModelValidationError(InstanceLabError, ValueError):
    """A model table violates a construction invariant."""


class UsageError(InstanceLabError, ValueError):
    """A caller violated an operation precondition (e.g. stepping a terminal state)."""


class ZeroLikelihoodError(InstanceLabError):
    """An observed history has zero probability under the model."""


class NoCompatibleInstanceError(InstanceLabError):
    """A history matches no instance in the set."""


class BudgetExceededError(InstanceLabError):
    """A solver exceeded its node budget."""

    def __init__(self, nodes_expanded: int, budget: int):
        super().__init__(f"node budget exceeded: {nodes_expanded} > {budget}")
        self.nodes_expanded = nodes_expanded
        self.budget = budget


class NonFiniteError(InstanceLabError):
    """A numeric quantity that must be finite was not."""
