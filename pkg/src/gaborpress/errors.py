"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, runtime failures
(dimension/structure/integrity/divergence) -> 3, file-format and I/O
problems -> 4.
"""


class GaborpressError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(GaborpressError, ValueError):
    """A Gabor parameter is non-finite or otherwise unusable."""


class DimensionError(GaborpressError, ValueError):
    """Array shapes disagree with what an operation requires."""


class StructureError(GaborpressError, ValueError):
    """A model does not have the layer structure a transform expects."""


class IntegrityError(GaborpressError, RuntimeError):
    """Internally inconsistent state (e.g. masks that disagree across coupled layers)."""


class FormatError(GaborpressError, ValueError):
    """A file does not conform to its declared binary/text format."""


class ConfigError(GaborpressError, ValueError):
    """An experiment config or CLI override failed validation."""


class TrainingDivergedError(GaborpressError, RuntimeError):
    """Training produced a non-finite loss."""
