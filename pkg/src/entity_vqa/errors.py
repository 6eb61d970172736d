"""Error types shared by every entity-vqa module.

Each error carries a ``kind`` that matches the contract name used in
machine-readable CLI output.
"""
from typing import Any, Dict, Optional


class EntityVQAError(Exception):
    """Base class for all entity-vqa errors."""

    kind = 'Error'

    def to_dict(self) -> Dict[str, Any]:
        """Serialize the error for JSON output."""
        return {'kind': self.kind, 'message': str(self)}


# embedding index

class ZeroVectorError(EntityVQAError, ValueError):
    kind = 'ZeroVector'


class DimMismatchError(EntityVQAError, ValueError):
    kind = 'DimMismatch'


class DuplicateIdError(EntityVQAError, KeyError):
    kind = 'DuplicateId'

    def __str__(self) -> str:
        return Exception.__str__(self)


class EmptyIndexError(EntityVQAError):
    kind = 'EmptyIndex'


class IndexSealedError(EntityVQAError):
    kind = 'IndexSealed'


class InvalidRecordError(EntityVQAError, ValueError):
    kind = 'InvalidRecord'


class IoFailureError(EntityVQAError, OSError):
    kind = 'IoFailure'


class CorruptHeaderError(EntityVQAError):
    kind = 'CorruptHeader'


class TruncatedPayloadError(EntityVQAError):
    kind = 'TruncatedPayload'


class AlreadyExistsError(EntityVQAError):
    kind = 'AlreadyExists'


# region extraction

class BackendUnavailableError(EntityVQAError):
    kind = 'BackendUnavailable'


class BackendMalformedResponseError(EntityVQAError):
    kind = 'BackendMalformedResponse'


class ImageLoadFailureError(EntityVQAError):
    kind = 'ImageLoadFailure'


# knowledge store

class NotFoundError(EntityVQAError, KeyError):
    kind = 'NotFound'

    def __str__(self) -> str:
        return Exception.__str__(self)


# modality adapter

class ShapeMismatchError(EntityVQAError, ValueError):
    kind = 'ShapeMismatch'


class NonFiniteInputError(EntityVQAError, ValueError):
    kind = 'NonFiniteInput'


class EmptyTextError(EntityVQAError, ValueError):
    kind = 'EmptyText'


class DivergenceDetectedError(EntityVQAError, ArithmeticError):
    kind = 'DivergenceDetected'


# answer generation

class GeneratorUnavailableError(EntityVQAError):
    kind = 'GeneratorUnavailable'


class GeneratorTimeoutError(EntityVQAError):
    kind = 'GeneratorTimeout'


# evaluation

class EmptyEvalSetError(EntityVQAError, ValueError):
    kind = 'EmptyEvalSet'


class DegenerateRankingError(EntityVQAError, ValueError):
    kind = 'DegenerateRanking'


class PerfectExpectedAgreementError(EntityVQAError, ArithmeticError):
    kind = 'PerfectExpectedAgreement'


# dataset pipeline

class UnknownStageError(EntityVQAError, ValueError):
    kind = 'UnknownStage'


class StageOrderError(EntityVQAError, ValueError):
    kind = 'StageOrder'


class TooFewEntitiesError(EntityVQAError, ValueError):
    kind = 'TooFewEntities'

    def __init__(self, category: str):
        super().__init__(f"category '{category}' has fewer than 3 entities")
        self.category = category


class DanglingReferenceError(EntityVQAError, KeyError):
    kind = 'DanglingReference'

    def __init__(self, entity_id: str):
        super().__init__(f"QA pair references unknown entity '{entity_id}'")
        self.entity_id = entity_id

    def __str__(self) -> str:
        return Exception.__str__(self)


class ClientUnavailableError(EntityVQAError):
    kind = 'ClientUnavailable'


class MalformedResponseError(EntityVQAError):
    kind = 'MalformedResponse'


# pipeline

class StageError(EntityVQAError):
    """A pipeline stage failed; wraps the underlying contract error."""

    kind = 'StageError'

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause

    def to_dict(self) -> Dict[str, Any]:
        cause_kind: Optional[str] = getattr(self.cause, 'kind', type(self.cause).__name__)
        return {'kind': cause_kind, 'stage': self.stage, 'message': str(self.cause)}
