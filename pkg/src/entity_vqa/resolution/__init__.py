"""Entity resolution: similarity-weighted voting over a retrieval set."""
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Union

from entity_vqa.indexer import RetrievalSet


@dataclass(frozen=True)
class ResolutionConfig:
    """Parameters of the vote."""

    k: int = 5
    min_score: float = 0.5
    min_margin: float = 0.05

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if not 0.0 <= self.min_score <= 1.0:
            raise ValueError("min_score must be in [0, 1]")
        if self.min_margin < 0:
            raise ValueError("min_margin must be non-negative")

    @classmethod
    def from_config(cls, config) -> 'ResolutionConfig':
        return cls(
            k=int(config.get('resolution.k', 5)),
            min_score=float(config.get('resolution.min_score', 0.5)),
            min_margin=float(config.get('resolution.min_margin', 0.05)),
        )


@dataclass(frozen=True)
class EntityHypothesis:
    """The resolved entity and the evidence behind it."""

    entity_id: str
    score: float
    support_count: int
    runner_up_score: float = 0.0
    best_hit: float = 0.0

    @property
    def resolved(self) -> bool:
        return True

    def to_dict(self) -> Dict[str, Any]:
        return {
            'status': 'resolved',
            'entity_id': self.entity_id,
            'score': self.score,
            'support_count': self.support_count,
            'runner_up_score': self.runner_up_score,
        }


@dataclass(frozen=True)
class Unknown:
    """No entity could be identified.

    ``reason`` is ``no-hits`` when every hit was filtered out and ``margin``
    when the winner did not lead the runner-up by enough; the pipeline uses
    ``no-retrieval`` when it answers without retrieval.
    """

    reason: str = 'no-hits'
    candidates: List[Dict[str, Any]] = field(default_factory=list, compare=False)

    @property
    def resolved(self) -> bool:
        return False

    def to_dict(self) -> Dict[str, Any]:
        return {'status': 'unknown', 'reason': self.reason, 'candidates': list(self.candidates)}


Resolution = Union[EntityHypothesis, Unknown]


def resolve(rs: RetrievalSet, cfg: ResolutionConfig = ResolutionConfig()) -> Resolution:
    """Vote over the top ``cfg.k`` hits.

    Hits scoring below ``min_score`` are dropped; each entity's score is the
    sum of its surviving similarities. Candidates are ranked by score, then
    best single hit, then entity id. The winner is Unknown when its lead over
    the runner-up is below ``min_margin`` times its own score.
    """
    grouped: Dict[str, List[float]] = {}
    for hit in rs.hits[:cfg.k]:
        if hit.score >= cfg.min_score:
            grouped.setdefault(hit.entity_id, []).append(hit.score)
    if not grouped:
        return Unknown(reason='no-hits')

    table = sorted(
        ((entity_id, math.fsum(scores), max(scores), len(scores))
         for entity_id, scores in grouped.items()),
        key=lambda row: (-row[1], -row[2], row[0]),
    )
    entity_id, score, best, support = table[0]
    runner_up = table[1][1] if len(table) > 1 else 0.0

    if score - runner_up < cfg.min_margin * score:
        candidates = [{'entity_id': e, 'score': s, 'support_count': n} for e, s, _, n in table]
        return Unknown(reason='margin', candidates=candidates)
    return EntityHypothesis(entity_id=entity_id, score=score, support_count=support,
                            runner_up_score=runner_up, best_hit=best)


def resolve_batch(sets: List[RetrievalSet], cfg: ResolutionConfig = ResolutionConfig()) -> List[Resolution]:
    """Resolve each retrieval set; order preserved."""
    return [resolve(rs, cfg) for rs in sets]
