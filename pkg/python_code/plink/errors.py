"""
Exception hierarchy for the plink package.
The CLI maps InputValidationError to exit status 1 and everything else to 2.
"""


class PlinkError(Exception):
    """Base class for all plink errors."""


class InputValidationError(PlinkError, ValueError):
    """Input files, configs or arguments violate a documented contract."""


class KBFormatError(InputValidationError):
    """Malformed knowledge-base file (bad line, duplicate id)."""


class DatasetFormatError(InputValidationError):
    """Malformed dataset file (span mismatch, unknown document)."""


class ConfigError(InputValidationError):
    """Inconsistent or missing run configuration."""


class EvaluationError(InputValidationError):
    """Predictions do not cover exactly the gold mentions."""


class EntityNotFoundError(PlinkError, LookupError):
    """An entity id is not present in the knowledge base."""

    def __init__(self, entity_id: str):
        super().__init__(f"Entity not found: {entity_id!r}")
        self.entity_id = entity_id


class AlignmentError(PlinkError, ValueError):
    """A mention span covers no subword of its sentence."""


class TrainingDivergedError(PlinkError, RuntimeError):
    """A training loss became NaN or infinite."""


class CheckpointError(PlinkError):
    """Checkpoint directory is missing, truncated or incompatible."""
