"""Exception hierarchy shared by every module of the package."""

from typing import Optional


class LayerError(Exception):
    """Base class for all errors raised by the package."""


class ShapeError(LayerError, ValueError):
    """Grid dimensions or array shapes do not agree."""


class DomainError(LayerError, ValueError):
    """An argument is outside the domain of the operation."""


class ConfigError(LayerError, ValueError):
    """A configuration is invalid or infeasible."""


class ManifestError(LayerError, ValueError):
    """A cohort manifest failed validation."""


class StructuralError(LayerError, ValueError):
    """The aggregation hierarchy is missing scans for a declared node."""


class RankError(LayerError, ValueError):
    """A design matrix is rank deficient."""


class SeparationError(LayerError, ValueError):
    """Logistic regression coefficients diverged because the classes are separable."""


class CapabilityError(LayerError, TypeError):
    """The scorer does not provide the requested capability."""


class TrainingError(LayerError, RuntimeError):
    """Training produced a non-finite loss or gradient."""


class FormatError(LayerError):
    """
    A binary or JSON artifact is malformed.

    :param message: What is wrong with the file.
    :param offset: The byte offset at which the problem was detected.
    """

    def __init__(self, message: str, offset: Optional[int] = None) -> None:
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
