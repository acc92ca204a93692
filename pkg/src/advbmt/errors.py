"""Exception hierarchy shared across the package."""

from __future__ import annotations


class AdvBmtError(Exception):
    """Base class for all package errors."""


class ParseError(AdvBmtError):
    """Malformed scenario file (bad JSON, missing or unknown key)."""


class SchemaError(AdvBmtError):
    """Scenario content violates an invariant."""


class ScenarioIoError(AdvBmtError, OSError):
    """Reading or writing a scenario file failed."""


class GenerationError(AdvBmtError):
    """Synthetic generator could not produce a valid layout."""


class InvalidStateError(AdvBmtError):
    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"invalid agent state at step {step}")


class CapacityError(AdvBmtError):
    """Input exceeds a configured size limit."""


class ShapeError(AdvBmtError):
    """Inconsistent tensor or batch dimensions."""


class MaskError(AdvBmtError):
    """Loss mask selects no entries."""


class DivergenceError(AdvBmtError):
    """Training loss became NaN or infinite."""


class GradCheckFailure(AdvBmtError):
    def __init__(self, offenders: list[str], message: str | None = None):
        self.offenders = offenders
        super().__init__(message or "gradient check failed: " + ", ".join(offenders))


class CheckpointError(AdvBmtError):
    """Checkpoint file is unreadable or does not match the requested config."""


class ModelError(AdvBmtError):
    """Model inference failed."""


class AlignmentError(AdvBmtError):
    """Prediction and ground truth horizons disagree."""


class BinningError(AdvBmtError):
    """Histograms do not share the same binning."""


class MissingPairError(AdvBmtError):
    """Prediction and ground-truth corpora share no scenario ids."""
