"""Exception types shared across the package."""


class AmcrnError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(AmcrnError):
    """A configuration value is invalid or inconsistent."""


class InputTooShort(AmcrnError):
    """The audio or feature input has too few samples/frames."""


class ShapeError(AmcrnError):
    """Tensor shapes are incompatible for the requested operation."""


class DegenerateInput(AmcrnError):
    """An input is degenerate (e.g. zero-norm vector where a direction is needed)."""


class NumericalError(AmcrnError):
    """A numerical failure (NaN/Inf gradients, singular covariance)."""


class InsufficientTrials(AmcrnError):
    """A score set is missing target or nontarget trials."""


class MissingUtterance(AmcrnError):
    """A trial references an utterance that cannot be resolved."""


class DuplicateId(AmcrnError):
    """An id already exists in the embedding store."""
