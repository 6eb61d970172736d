"""Dataset curation: manifests, filtering, QA linting and popularity buckets."""
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from entity_vqa.dataset.pageviews import (
    PageviewStats,
    fetch_all_pageviews,
    fetch_pageviews,
    make_pageview_client,
)
from entity_vqa.errors import (
    DanglingReferenceError,
    InvalidRecordError,
    IoFailureError,
    StageOrderError,
    TooFewEntitiesError,
    UnknownStageError,
)
from entity_vqa.schema import CATEGORIES, Bucket, QuestionType, is_category
from entity_vqa.text import mentions

logger = logging.getLogger(__name__)

DEFAULT_MIN_IMAGES = 10
CSV_COLUMNS = ['entity_name', 'category', 'wiki_url', 'image_url', 'source_page_url', 'renamed_image_name']
OPTIONAL_CSV_COLUMNS = ['entity_id', 'wiki_status', 'ambiguous_flag']


@dataclass(frozen=True)
class ImageRecord:
    image_url: str
    source_page_url: str = ''
    renamed_image_name: str = ''

    def to_dict(self) -> Dict[str, str]:
        return {'image_url': self.image_url, 'source_page_url': self.source_page_url,
                'renamed_image_name': self.renamed_image_name}


@dataclass
class EntityManifestRow:
    """One entity with its wiki page and curated images.

    ``wiki_status`` holds the HTTP status seen when the wiki URL was checked
    upstream (None when unchecked).
    """

    entity_name: str
    category: str
    wiki_url: str = ''
    image_records: List[ImageRecord] = field(default_factory=list)
    ambiguous_flag: bool = False
    wiki_status: Optional[int] = None
    entity_id: str = ''
    aliases: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.entity_name:
            raise InvalidRecordError("manifest row has an empty entity_name")
        if not is_category(self.category):
            raise InvalidRecordError(f"'{self.entity_name}' has unknown category {self.category!r}")
        if not self.entity_id:
            self.entity_id = self.entity_name

    def to_dict(self) -> Dict[str, Any]:
        return {
            'entity_id': self.entity_id,
            'entity_name': self.entity_name,
            'category': self.category,
            'wiki_url': self.wiki_url,
            'wiki_status': self.wiki_status,
            'ambiguous_flag': self.ambiguous_flag,
            'aliases': list(self.aliases),
            'image_records': [r.to_dict() for r in self.image_records],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EntityManifestRow':
        try:
            return cls(
                entity_name=data['entity_name'],
                category=data['category'],
                wiki_url=data.get('wiki_url') or '',
                image_records=[ImageRecord(**r) for r in data.get('image_records', [])],
                ambiguous_flag=_truthy(data.get('ambiguous_flag', False)),
                wiki_status=_status(data.get('wiki_status')),
                entity_id=data.get('entity_id') or '',
                aliases=list(data.get('aliases', [])),
            )
        except (KeyError, TypeError) as e:
            raise InvalidRecordError(f"malformed manifest row: {e}") from e


class FilterStage(str, Enum):
    """Curation filters in their canonical order."""

    WIKI_VALIDITY = 'WikiValidity'
    IMAGE_COUNT = 'ImageCount'
    AMBIGUITY = 'Ambiguity'

    @classmethod
    def parse(cls, value) -> 'FilterStage':
        """Accept ``WikiValidity``, ``wiki-validity`` or ``wiki_validity``."""
        if isinstance(value, cls):
            return value
        key = str(value).replace('-', '').replace('_', '').lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise UnknownStageError(f"unknown filter stage {value!r}")

    @property
    def position(self) -> int:
        return list(FilterStage).index(self)


@dataclass(frozen=True)
class FilterParams:
    min_images: int = DEFAULT_MIN_IMAGES


@dataclass
class FilterReport:
    """Outcome of one filter stage."""

    stage: FilterStage
    kept: List[EntityManifestRow]
    removed: List[EntityManifestRow]
    per_category_counts: Dict[str, Dict[str, int]]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'stage': self.stage.value,
            'kept': len(self.kept),
            'removed': len(self.removed),
            'removed_entities': [r.entity_name for r in self.removed],
            'per_category_counts': self.per_category_counts,
        }


def _passes(row: EntityManifestRow, stage: FilterStage, params: FilterParams) -> bool:
    if stage == FilterStage.WIKI_VALIDITY:
        return bool(row.wiki_url) and row.wiki_status != 404
    if stage == FilterStage.IMAGE_COUNT:
        return len(row.image_records) >= params.min_images
    return not row.ambiguous_flag


def filter_stage(manifest: Sequence[EntityManifestRow], stage, params: FilterParams = FilterParams()) -> FilterReport:
    """Apply one filter.

    WikiValidity drops rows with no wiki URL or a 404 status, ImageCount drops
    rows with fewer than ``params.min_images`` images, and Ambiguity drops
    rows flagged as ambiguous.

    Raises:
        UnknownStageError: if ``stage`` names no filter
    """
    stage = FilterStage.parse(stage)
    kept, removed = [], []
    counts: Dict[str, Dict[str, int]] = {}
    for row in manifest:
        ok = _passes(row, stage, params)
        (kept if ok else removed).append(row)
        bucket = counts.setdefault(row.category, {'kept': 0, 'removed': 0})
        bucket['kept' if ok else 'removed'] += 1
    ordered = {c: counts[c] for c in CATEGORIES if c in counts}
    logger.info("%s: kept %d, removed %d", stage.value, len(kept), len(removed))
    return FilterReport(stage=stage, kept=kept, removed=removed, per_category_counts=ordered)


@dataclass
class PipelineReport:
    """Result of running several filters in canonical order."""

    initial: List[EntityManifestRow]
    stages: List[FilterReport]

    @property
    def kept(self) -> List[EntityManifestRow]:
        return self.stages[-1].kept if self.stages else list(self.initial)

    def counts_table(self) -> List[List[Any]]:
        """Per category: raw count, then the count remaining after each stage."""
        rows = []
        for category in CATEGORIES:
            raw = sum(1 for r in self.initial if r.category == category)
            if not raw:
                continue
            rows.append([category, raw] + [
                sum(1 for r in s.kept if r.category == category) for s in self.stages
            ])
        rows.append(['Total', len(self.initial)] + [len(s.kept) for s in self.stages])
        return rows

    def to_dict(self) -> Dict[str, Any]:
        return {
            'initial': len(self.initial),
            'kept': len(self.kept),
            'stages': [s.to_dict() for s in self.stages],
        }


def run_filters(manifest: Sequence[EntityManifestRow], stages: Optional[Sequence[Any]] = None,
                params: FilterParams = FilterParams()) -> PipelineReport:
    """Run filters WikiValidity -> ImageCount -> Ambiguity (or a subsequence of them).

    Raises:
        StageOrderError: if the stages are not in canonical order
    """
    parsed = [FilterStage.parse(s) for s in (stages if stages is not None else list(FilterStage))]
    positions = [s.position for s in parsed]
    if any(b <= a for a, b in zip(positions, positions[1:])):
        raise StageOrderError(
            "filters must run in the order WikiValidity, ImageCount, Ambiguity; got "
            + ', '.join(s.value for s in parsed))
    current = list(manifest)
    reports = []
    for stage in parsed:
        report = filter_stage(current, stage, params)
        reports.append(report)
        current = report.kept
    return PipelineReport(initial=list(manifest), stages=reports)


@dataclass(frozen=True)
class AnonymityResult:
    passed: bool
    span: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {'passed': self.passed, 'span': self.span}


def check_anonymity(question: str, entity_name: str, aliases: Sequence[str] = ()) -> AnonymityResult:
    """Fail if the question names the entity or an alias as a contiguous token run."""
    if not entity_name:
        raise ValueError("entity_name must be non-empty")
    span = mentions(question, [entity_name] + list(aliases))
    return AnonymityResult(passed=span is None, span=span)


@dataclass
class QAPair:
    entity_id: str
    question: str
    answer: str
    qtype: QuestionType
    image_id: str = ''

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'QAPair':
        try:
            return cls(
                entity_id=data['entity_id'],
                question=data.get('question', ''),
                answer=data.get('answer', ''),
                qtype=QuestionType.parse(data.get('qtype', 'Static')),
                image_id=data.get('image_id', ''),
            )
        except (KeyError, ValueError) as e:
            raise InvalidRecordError(f"malformed QA pair: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        return {'entity_id': self.entity_id, 'question': self.question, 'answer': self.answer,
                'qtype': self.qtype.value, 'image_id': self.image_id}


def validate_qapair(qa: QAPair, entity: EntityManifestRow) -> List[str]:
    """Problems with one QA pair; an empty list means it is valid."""
    problems = []
    if not qa.question.strip():
        problems.append('empty question')
    if not qa.answer.strip():
        problems.append('empty answer')
    names = [entity.entity_name] + list(entity.aliases)
    if qa.answer.strip() and not mentions(qa.answer, names):
        problems.append('answer does not name the entity')
    if qa.question.strip():
        anonymity = check_anonymity(qa.question, entity.entity_name, entity.aliases)
        if not anonymity.passed:
            problems.append(f"question names the entity: '{anonymity.span}'")
    return problems


def lint_qapairs(qapairs: Sequence[QAPair], manifest: Sequence[EntityManifestRow]) -> List[Dict[str, Any]]:
    """Validate every QA pair; returns one issue entry per invalid pair."""
    entities = {row.entity_id: row for row in manifest}
    issues = []
    for index, qa in enumerate(qapairs):
        entity = entities.get(qa.entity_id)
        problems = ['unknown entity'] if entity is None else validate_qapair(qa, entity)
        if problems:
            issues.append({'index': index, 'entity_id': qa.entity_id, 'problems': problems})
    return issues


def bucket_popularity(stats: Sequence[PageviewStats], scheme: str = 'tertiles') -> Dict[str, Bucket]:
    """Assign Head/Torso/Tail by per-category tertiles of mean views.

    Within a category entities are ordered by mean views descending, then
    name ascending; any remainder goes to Head first, then Torso.

    Raises:
        TooFewEntitiesError: if a category has fewer than 3 entities
    """
    if scheme != 'tertiles':
        raise ValueError(f"unknown bucketing scheme {scheme!r}")
    by_category: Dict[str, List[PageviewStats]] = {}
    for s in stats:
        by_category.setdefault(s.category, []).append(s)

    buckets: Dict[str, Bucket] = {}
    for category in sorted(by_category):
        members = by_category[category]
        if len(members) < 3:
            raise TooFewEntitiesError(category)
        members = sorted(members, key=lambda s: (-s.mean_views, s.entity_name))
        base, remainder = divmod(len(members), 3)
        head = base + (remainder >= 1)
        torso = base + (remainder >= 2)
        for rank, s in enumerate(members):
            if rank < head:
                buckets[s.entity_id] = Bucket.HEAD
            elif rank < head + torso:
                buckets[s.entity_id] = Bucket.TORSO
            else:
                buckets[s.entity_id] = Bucket.TAIL
    return buckets


def category_popularity(stats: Sequence[PageviewStats]) -> Dict[str, Dict[str, float]]:
    """Per category: entity count, total views and average mean views per entity."""
    table: Dict[str, Dict[str, float]] = {}
    for s in stats:
        row = table.setdefault(s.category, {'entities': 0, 'total_views': 0, 'average_views': 0.0})
        row['entities'] += 1
        row['total_views'] += sum(s.daily_views)
    for category, row in table.items():
        means = [s.mean_views for s in stats if s.category == category]
        row['average_views'] = math.fsum(means) / len(means)
    return {c: table[c] for c in sorted(table)}


@dataclass
class StatsReport:
    n_categories: int
    n_entities: int
    n_qa: int
    n_images: int
    avg_answer_tokens: float
    per_category: Dict[str, Dict[str, int]]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_categories': self.n_categories,
            'n_entities': self.n_entities,
            'n_qa': self.n_qa,
            'n_images': self.n_images,
            'avg_answer_tokens': self.avg_answer_tokens,
            'per_category': self.per_category,
        }


def dataset_stats(manifest: Sequence[EntityManifestRow], qapairs: Sequence[QAPair]) -> StatsReport:
    """Dataset size summary with a per-category histogram.

    Raises:
        DanglingReferenceError: if a QA pair names an entity not in the manifest
    """
    entities = {row.entity_id: row for row in manifest}
    per_category: Dict[str, Dict[str, int]] = {}
    for row in manifest:
        entry = per_category.setdefault(row.category, {'entities': 0, 'images': 0, 'qa': 0})
        entry['entities'] += 1
        entry['images'] += len(row.image_records)
    answer_tokens = 0
    for qa in qapairs:
        if qa.entity_id not in entities:
            raise DanglingReferenceError(qa.entity_id)
        per_category[entities[qa.entity_id].category]['qa'] += 1
        answer_tokens += len(qa.answer.split())
    return StatsReport(
        n_categories=len(per_category),
        n_entities=len(manifest),
        n_qa=len(qapairs),
        n_images=sum(len(row.image_records) for row in manifest),
        avg_answer_tokens=answer_tokens / len(qapairs) if qapairs else 0.0,
        per_category={c: per_category[c] for c in CATEGORIES if c in per_category},
    )


def sample_entities(manifest: Sequence[EntityManifestRow], fraction: float = 0.1,
                    seed: int = 0) -> List[EntityManifestRow]:
    """Seeded per-category sample (at least one entity per category), manifest order kept."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    chosen = set()
    for category in CATEGORIES:
        indices = [i for i, row in enumerate(manifest) if row.category == category]
        if not indices:
            continue
        size = max(1, int(round(fraction * len(indices))))
        chosen.update(int(i) for i in rng.choice(indices, size=size, replace=False))
    return [row for i, row in enumerate(manifest) if i in chosen]


def _truthy(value: Any) -> bool:
    return str(value).strip().lower() in ('1', 'true', 'yes', 'y')


def _status(value: Any, where: str = 'manifest row') -> Optional[int]:
    """HTTP status of the wiki page; blank means unchecked."""
    if value is None or str(value).strip() == '':
        return None
    try:
        return int(str(value).strip())
    except ValueError as e:
        raise InvalidRecordError(f"{where}: wiki_status must be an integer, got {value!r}") from e


def read_manifest_csv(path: str) -> List[EntityManifestRow]:
    """Read a manifest CSV with one row per image record, grouped by entity."""
    rows: Dict[str, EntityManifestRow] = {}
    try:
        with open(path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.DictReader(f)
            missing = [c for c in ('entity_name', 'category') if c not in (reader.fieldnames or [])]
            if missing:
                raise InvalidRecordError(f"{path} lacks columns: {', '.join(missing)}")
            for record in reader:
                name = record['entity_name']
                row = rows.get(name)
                if row is None:
                    row = EntityManifestRow(
                        entity_name=name,
                        category=record['category'],
                        wiki_url=record.get('wiki_url') or '',
                        ambiguous_flag=_truthy(record.get('ambiguous_flag', '')),
                        wiki_status=_status(record.get('wiki_status'), f"{path}:{reader.line_num}"),
                        entity_id=record.get('entity_id') or '',
                    )
                    rows[name] = row
                if record.get('image_url'):
                    row.image_records.append(ImageRecord(
                        image_url=record['image_url'],
                        source_page_url=record.get('source_page_url') or '',
                        renamed_image_name=record.get('renamed_image_name') or '',
                    ))
    except OSError as e:
        raise IoFailureError(f"cannot read manifest {path}: {e}") from e
    return list(rows.values())


def write_manifest_csv(manifest: Iterable[EntityManifestRow], path: str):
    try:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS + OPTIONAL_CSV_COLUMNS)
            writer.writeheader()
            for row in manifest:
                base = {
                    'entity_name': row.entity_name,
                    'category': row.category,
                    'wiki_url': row.wiki_url,
                    'entity_id': row.entity_id,
                    'wiki_status': '' if row.wiki_status is None else row.wiki_status,
                    'ambiguous_flag': 'true' if row.ambiguous_flag else 'false',
                }
                for image in row.image_records or [ImageRecord('')]:
                    writer.writerow(dict(base, **image.to_dict()))
    except OSError as e:
        raise IoFailureError(f"cannot write manifest {path}: {e}") from e


def _read_jsonl(path: str) -> List[Dict[str, Any]]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return [json.loads(line) for line in f if line.strip()]
    except OSError as e:
        raise IoFailureError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InvalidRecordError(f"{path}: {e}") from e


def _write_jsonl(rows: Iterable[Dict[str, Any]], path: str):
    try:
        with open(path, 'w', encoding='utf-8') as f:
            for row in rows:
                f.write(json.dumps(row, ensure_ascii=False) + '\n')
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e


def read_manifest_jsonl(path: str) -> List[EntityManifestRow]:
    return [EntityManifestRow.from_dict(row) for row in _read_jsonl(path)]


def write_manifest_jsonl(manifest: Iterable[EntityManifestRow], path: str):
    _write_jsonl((row.to_dict() for row in manifest), path)


def read_manifest(path: str) -> List[EntityManifestRow]:
    """Read a manifest as CSV or JSONL depending on the file extension."""
    if path.lower().endswith('.csv'):
        return read_manifest_csv(path)
    return read_manifest_jsonl(path)


def read_qapairs(path: str) -> List[QAPair]:
    return [QAPair.from_dict(row) for row in _read_jsonl(path)]


def write_qapairs(qapairs: Iterable[QAPair], path: str):
    _write_jsonl((qa.to_dict() for qa in qapairs), path)


def read_pageview_stats(path: str) -> List[PageviewStats]:
    """Read PageviewStats JSONL rows."""
    try:
        return [PageviewStats.from_dict(row) for row in _read_jsonl(path)]
    except (KeyError, ValueError) as e:
        raise InvalidRecordError(f"malformed pageview stats in {path}: {e}") from e


__all__ = [
    'ImageRecord', 'EntityManifestRow', 'FilterStage', 'FilterParams', 'FilterReport',
    'PipelineReport', 'filter_stage', 'run_filters', 'AnonymityResult', 'check_anonymity',
    'QAPair', 'validate_qapair', 'lint_qapairs', 'bucket_popularity', 'category_popularity',
    'StatsReport', 'dataset_stats', 'sample_entities', 'PageviewStats', 'fetch_pageviews',
    'fetch_all_pageviews', 'make_pageview_client', 'read_manifest', 'read_manifest_csv',
    'write_manifest_csv', 'read_manifest_jsonl', 'write_manifest_jsonl', 'read_qapairs',
    'write_qapairs', 'read_pageview_stats',
]
