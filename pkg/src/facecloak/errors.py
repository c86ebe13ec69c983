"""Exception hierarchy.

Every error carries a ``stage`` (the subsystem that raised it) and a ``kind``
(a short machine-readable tag) so the CLI can emit structured error JSON.
"""

from __future__ import annotations


class FaceCloakError(Exception):
    stage = "facecloak"
    kind = "error"

    def to_dict(self) -> dict:
        return {"stage": self.stage, "kind": self.kind, "message": str(self)}


class ConfigError(FaceCloakError, ValueError):
    stage = "config"
    kind = "config"


class InvariantError(FaceCloakError, ValueError):
    """A domain object was constructed from data that breaks its invariants."""

    stage = "core"
    kind = "invariant"


class ShapeError(InvariantError):
    kind = "shape_mismatch"


# -- persistence ---------------------------------------------------------------


class PersistenceError(FaceCloakError, OSError):
    stage = "persistence"
    kind = "io"

    def __init__(self, message: str, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path


class ContainerNotFoundError(PersistenceError, FileNotFoundError):
    kind = "missing_file"


class CorruptHeaderError(PersistenceError):
    kind = "corrupt_header"


class CorruptPayloadError(PersistenceError):
    kind = "corrupt_payload"


class ContainerInvariantError(PersistenceError):
    kind = "invariant_violation"


# -- backends ------------------------------------------------------------------


class BackendError(FaceCloakError):
    stage = "backend"
    kind = "backend"


class CapabilityError(BackendError):
    kind = "capability"


class ModelFormatError(BackendError):
    kind = "format"


class TrainingError(BackendError):
    kind = "training"

    def __init__(self, message: str, accuracy: float | None = None):
        super().__init__(message)
        self.accuracy = accuracy


class DatasetTooSmallError(TrainingError):
    kind = "dataset_too_small"


# -- pipeline stages -----------------------------------------------------------


class GenerationError(FaceCloakError):
    stage = "synthgen"
    kind = "generation"

    def __init__(self, message: str, generator_id: str = ""):
        super().__init__(f"[{generator_id}] {message}" if generator_id else message)
        self.generator_id = generator_id


class VariantValidationError(GenerationError):
    kind = "validation"


class CountMismatchError(GenerationError):
    kind = "count_mismatch"


class DetectionError(FaceCloakError):
    stage = "focusing"
    kind = "detection"


class NumericError(FaceCloakError, ArithmeticError):
    stage = "focusing"
    kind = "numeric"


class PoolError(FaceCloakError, ValueError):
    stage = "optimizer"
    kind = "pool"


class OptimizationError(FaceCloakError):
    stage = "optimizer"
    kind = "optimization"

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(f"iteration {iteration}: {message}" if iteration is not None else message)
        self.iteration = iteration


class EvaluationError(FaceCloakError, ValueError):
    stage = "eval"
    kind = "evaluation"


class DataError(FaceCloakError):
    stage = "ingestion"
    kind = "data"
