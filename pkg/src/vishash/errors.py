"""Exception types shared across the toolkit."""


class VishashError(Exception):
    """Base class for all toolkit errors."""


class EmptyDataset(VishashError):
    """Curation or training received/produced no usable records."""


class ParseError(VishashError):
    """A data file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MissingField(VishashError):
    """A record is missing a required field; carries the field name."""

    def __init__(self, field: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"missing field {field!r}{where}")
        self.field = field
        self.line = line


class ConfigError(VishashError):
    """An invalid or unsatisfiable configuration."""


class DimensionMismatch(VishashError):
    """An input's shape is incompatible with the model."""


class NonFiniteLoss(VishashError):
    """Training produced a NaN/inf loss; carries the iteration index."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration


class VersionMismatch(VishashError):
    """Checkpoint format version is not supported."""


class CorruptChecksum(VishashError):
    """Checkpoint failed its integrity check (or is unreadable)."""


class HeadMismatch(VishashError):
    """Checkpoint head kind differs from what the caller expected."""


class ImageTooSmall(VishashError):
    """Image is below the minimum size for patch sampling."""


class EmptyBag(VishashError):
    """A bag of patches must contain at least one patch."""


class UnknownLabel(VishashError):
    """Label not present in the model's vocabulary."""


class NoKnownTokens(VishashError):
    """Every token was out-of-vocabulary for the embedding table."""


class MissingPrediction(VishashError):
    """An image lacks a (long enough) prediction ranking."""


class EmptyGroundTruth(VishashError):
    """Ground truth for a metric must be non-empty."""


class DegenerateBox(VishashError):
    """Box width and height must be positive."""
