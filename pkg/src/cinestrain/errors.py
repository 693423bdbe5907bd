"""Exception taxonomy shared across the package.

Data errors (bad files, inconsistent geometry, empty masks) are kept apart
from numerical failures (non-finite losses, degenerate inputs) so the CLI
can map them to distinct exit codes.
"""


class CinestrainError(Exception):
    """Base class for all package errors."""


class DataError(CinestrainError):
    """Invalid or inconsistent input data."""


class MhaParseError(DataError):
    """Malformed MetaImage header; the message names the offending key."""

    def __init__(self, key: str, detail: str = ""):
        self.key = key
        msg = f"invalid or missing MetaImage header key: {key}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class MhaPayloadError(DataError):
    """Payload size does not match the declared DimSize/ElementType."""


class GeometryError(DataError):
    """Volume geometries are incompatible for the requested operation."""


class ConfigError(DataError):
    """A configuration or required mask makes the operation ill-posed."""


class ParamsIOError(DataError):
    """Network parameter file is malformed, truncated or incompatible."""


class NumericalError(CinestrainError):
    """A numerical computation failed or would produce non-finite values."""


class DegenerateInputError(NumericalError):
    """A loss input carries no signal (e.g. both sample sets constant)."""


class OptimizerError(NumericalError):
    """Non-finite gradients or loss reached the optimizer."""
