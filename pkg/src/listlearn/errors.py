"""Exception hierarchy shared by all modules."""


class ListLearnError(Exception):
    pass


class ConfigurationError(ListLearnError, ValueError):
    """Invalid sizes, probabilities or flag combinations."""


class ShapeError(ListLearnError, ValueError):
    """Array dimensions do not line up."""


class ValidationError(ListLearnError, ValueError):
    """A ranked list is not valid for its candidate pool."""


class ContractViolation(ListLearnError, ValueError):
    """A caller broke a documented precondition."""


class GenerationError(ListLearnError, RuntimeError):
    """Synthetic data could not satisfy its constraints."""


class UpdateRejected(ListLearnError, FloatingPointError):
    """A parameter update produced or consumed non-finite values.

    The model is left untouched when this is raised.
    """
