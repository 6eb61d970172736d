"""Knowledge store: local entity records plus best-effort external fetchers."""
import concurrent.futures
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional

import requests

from entity_vqa.errors import (
    BackendMalformedResponseError,
    BackendUnavailableError,
    InvalidRecordError,
    IoFailureError,
    NotFoundError,
)
from entity_vqa.schema import QuestionType, is_category
from entity_vqa.text import content_tokens, tokenize

logger = logging.getLogger(__name__)


class SourceKind(str, Enum):
    """Where a snippet came from."""

    LOCAL_KB = 'LocalKB'
    KNOWLEDGE_GRAPH = 'KnowledgeGraph'
    WEB_SEARCH = 'WebSearch'
    PAGEVIEW_API = 'PageviewApi'


SOURCE_PRIORITY: Dict[SourceKind, float] = {
    SourceKind.LOCAL_KB: 1.0,
    SourceKind.KNOWLEDGE_GRAPH: 0.8,
    SourceKind.WEB_SEARCH: 0.6,
    SourceKind.PAGEVIEW_API: 0.4,
}

DEFAULT_RECENCY_WINDOW_DAYS = 7
DEFAULT_RECENCY_BONUS = 0.5
DEFAULT_TIMEOUT = 3.0


def parse_timestamp(value: Any) -> Optional[datetime]:
    """Parse an ISO-8601 timestamp; naive values are taken as UTC."""
    if value is None or value == '':
        return None
    if isinstance(value, datetime):
        parsed = value
    else:
        text = str(value).strip()
        if text.endswith('Z'):
            text = text[:-1] + '+00:00'
        parsed = datetime.fromisoformat(text)
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return parsed


def _as_utc(value: datetime) -> datetime:
    if value.tzinfo is None:
        return value.replace(tzinfo=timezone.utc)
    return value.astimezone(timezone.utc)


def _format_timestamp(value: Optional[datetime]) -> Optional[str]:
    return value.isoformat() if value is not None else None


@dataclass(frozen=True)
class Fact:
    predicate: str
    object: str
    source_uri: str = ''
    retrieved_at: Optional[datetime] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'predicate': self.predicate,
            'object': self.object,
            'source_uri': self.source_uri,
            'retrieved_at': _format_timestamp(self.retrieved_at),
        }


@dataclass
class EntityRecord:
    """Curated knowledge about one entity."""

    entity_id: str
    name: str
    category: str
    summary: str = ''
    facts: List[Fact] = field(default_factory=list)
    aliases: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.name:
            raise InvalidRecordError(f"entity {self.entity_id!r} has no name")
        if not is_category(self.category):
            raise InvalidRecordError(f"entity {self.entity_id!r} has unknown category {self.category!r}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EntityRecord':
        try:
            facts = [
                Fact(
                    predicate=f['predicate'],
                    object=f['object'],
                    source_uri=f.get('source_uri', ''),
                    retrieved_at=parse_timestamp(f.get('retrieved_at')),
                )
                for f in data.get('facts', [])
            ]
            return cls(
                entity_id=data['entity_id'],
                name=data.get('name', ''),
                category=data.get('category', ''),
                summary=data.get('summary', ''),
                facts=facts,
                aliases=list(data.get('aliases', [])),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, InvalidRecordError):
                raise
            raise InvalidRecordError(f"malformed entity record: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        return {
            'entity_id': self.entity_id,
            'name': self.name,
            'category': self.category,
            'summary': self.summary,
            'facts': [f.to_dict() for f in self.facts],
            'aliases': list(self.aliases),
        }


@dataclass(frozen=True)
class KnowledgeSnippet:
    """A piece of text about an entity, tagged with its source."""

    text: str
    source_kind: SourceKind
    score: float = 0.0
    timestamp: Optional[datetime] = None
    uri: str = ''

    def __post_init__(self):
        if not self.text:
            raise InvalidRecordError("snippet text must be non-empty")
        if not math.isfinite(self.score):
            raise InvalidRecordError("snippet score must be finite")

    @property
    def priority(self) -> float:
        return SOURCE_PRIORITY[self.source_kind]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'text': self.text,
            'source_kind': self.source_kind.value,
            'score': self.score,
            'timestamp': _format_timestamp(self.timestamp),
            'uri': self.uri,
        }


class KnowledgeStore:
    """Immutable-after-load map of entity_id -> EntityRecord."""

    def __init__(self, records: Iterable[EntityRecord] = ()):
        self._records: Dict[str, EntityRecord] = {}
        for record in records:
            self._records[record.entity_id] = record

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self._records

    @classmethod
    def from_jsonl(cls, path: str) -> 'KnowledgeStore':
        """Load a JSONL file of entity records."""
        records = []
        try:
            with open(path, 'r', encoding='utf-8') as f:
                for line_no, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    try:
                        records.append(EntityRecord.from_dict(json.loads(line)))
                    except json.JSONDecodeError as e:
                        raise InvalidRecordError(f"{path}:{line_no}: {e}") from e
        except OSError as e:
            raise IoFailureError(f"cannot read knowledge base {path}: {e}") from e
        logger.info("loaded %d entity records from %s", len(records), path)
        return cls(records)

    def save_jsonl(self, path: str):
        try:
            with open(path, 'w', encoding='utf-8') as f:
                for record in self.records():
                    f.write(json.dumps(record.to_dict(), ensure_ascii=False) + '\n')
        except OSError as e:
            raise IoFailureError(f"cannot write knowledge base {path}: {e}") from e

    def records(self) -> List[EntityRecord]:
        return [self._records[k] for k in sorted(self._records)]

    def lookup_local(self, entity_id: str) -> EntityRecord:
        """Get the record for ``entity_id``.

        Raises:
            NotFoundError: if the store has no such entity
        """
        try:
            return self._records[entity_id]
        except KeyError:
            raise NotFoundError(f"entity '{entity_id}' not in knowledge base") from None


def local_snippets(record: EntityRecord) -> List[KnowledgeSnippet]:
    """The record's summary followed by one ``predicate: object`` snippet per fact."""
    snippets = []
    if record.summary:
        snippets.append(KnowledgeSnippet(text=record.summary, source_kind=SourceKind.LOCAL_KB))
    for fact in record.facts:
        snippets.append(KnowledgeSnippet(
            text=f"{fact.predicate}: {fact.object}",
            source_kind=SourceKind.LOCAL_KB,
            timestamp=fact.retrieved_at,
            uri=fact.source_uri,
        ))
    return snippets


def score_snippet(snippet: KnowledgeSnippet, question: str, qtype: QuestionType,
                  now: Optional[datetime] = None,
                  recency_window_days: float = DEFAULT_RECENCY_WINDOW_DAYS,
                  recency_bonus: float = DEFAULT_RECENCY_BONUS) -> float:
    """Source priority + question overlap + recency bonus.

    Overlap is the fraction of the question's content tokens found in the
    snippet. Dynamic questions add ``recency_bonus`` for snippets stamped
    within ``recency_window_days`` of ``now`` (future stamps count as fresh).
    Naive datetimes on either side are taken as UTC.
    """
    score = snippet.priority

    question_tokens = set(content_tokens(question))
    if question_tokens:
        shared = question_tokens & set(tokenize(snippet.text))
        score += len(shared) / len(question_tokens)

    if qtype == QuestionType.DYNAMIC and snippet.timestamp is not None:
        now = _as_utc(now or datetime.now(timezone.utc))
        if now - _as_utc(snippet.timestamp) <= timedelta(days=recency_window_days):
            score += recency_bonus
    return score


class StaticFetcher:
    """Fetcher serving fixed snippets per entity name (fixtures and tests)."""

    def __init__(self, source_kind: SourceKind, table: Optional[Dict[str, List[Dict[str, Any]]]] = None,
                 timeout: float = DEFAULT_TIMEOUT, name: Optional[str] = None):
        self.source_kind = SourceKind(source_kind)
        self.table = dict(table or {})
        self.timeout = timeout
        self.name = name or self.source_kind.value

    @classmethod
    def from_jsonl(cls, path: str, source_kind: SourceKind, **kwargs) -> 'StaticFetcher':
        """Load rows of ``{"entity": name, "text": ..., "uri": ..., "timestamp": ...}``."""
        table: Dict[str, List[Dict[str, Any]]] = {}
        try:
            with open(path, 'r', encoding='utf-8') as f:
                for line in f:
                    if line.strip():
                        row = json.loads(line)
                        table.setdefault(row['entity'], []).append(row)
        except OSError as e:
            raise IoFailureError(f"cannot read snippet fixture {path}: {e}") from e
        return cls(source_kind, table, **kwargs)

    def fetch(self, entity_name: str, question: str) -> List[KnowledgeSnippet]:
        return [_snippet_from_wire(row, self.source_kind) for row in self.table.get(entity_name, [])]


class HttpSnippetFetcher:
    """Knowledge-graph or web-search source behind ``GET <url>?entity=..&question=..``."""

    def __init__(self, source_kind: SourceKind, url: str, timeout: float = DEFAULT_TIMEOUT,
                 name: Optional[str] = None):
        self.source_kind = SourceKind(source_kind)
        self.url = url
        self.timeout = timeout
        self.name = name or self.source_kind.value

    def fetch(self, entity_name: str, question: str) -> List[KnowledgeSnippet]:
        try:
            response = requests.get(
                self.url,
                params={'entity': entity_name, 'question': question},
                timeout=self.timeout,
            )
            response.raise_for_status()
        except requests.RequestException as e:
            raise BackendUnavailableError(f"{self.name} unavailable: {e}") from e
        try:
            rows = response.json()['snippets']
            return [_snippet_from_wire(row, self.source_kind) for row in rows]
        except (ValueError, KeyError, TypeError) as e:
            raise BackendMalformedResponseError(f"{self.name} returned a malformed payload: {e}") from e


def _snippet_from_wire(row: Dict[str, Any], kind: SourceKind) -> KnowledgeSnippet:
    return KnowledgeSnippet(
        text=row['text'],
        source_kind=kind,
        timestamp=parse_timestamp(row.get('timestamp')),
        uri=row.get('uri', ''),
    )


def make_fetcher(spec: Dict[str, Any], default_timeout: float = DEFAULT_TIMEOUT):
    """Build a fetcher from a config entry ``{kind, url | path, timeout, name}``."""
    kind = SourceKind(spec['kind'])
    timeout = float(spec.get('timeout', default_timeout))
    name = spec.get('name')
    if spec.get('url'):
        return HttpSnippetFetcher(kind, spec['url'], timeout=timeout, name=name)
    if spec.get('path'):
        return StaticFetcher.from_jsonl(spec['path'], kind, timeout=timeout, name=name)
    raise ValueError(f"fetcher spec needs 'url' or 'path': {spec!r}")


@dataclass
class AggregationResult:
    """Ranked snippets plus what happened at each source."""

    snippets: List[KnowledgeSnippet]
    report: Dict[str, Dict[str, Any]]
    entity_name: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'entity_name': self.entity_name,
            'snippets': [s.to_dict() for s in self.snippets],
            'report': self.report,
        }


class KnowledgeAggregator:
    """Collects, deduplicates and ranks snippets for a resolved entity."""

    def __init__(self, store: Optional[KnowledgeStore] = None, fetchers: Optional[List[Any]] = None,
                 budget: int = 5, recency_window_days: float = DEFAULT_RECENCY_WINDOW_DAYS,
                 recency_bonus: float = DEFAULT_RECENCY_BONUS):
        if budget < 1:
            raise ValueError("budget must be at least 1")
        self.store = store or KnowledgeStore()
        self.fetchers = list(fetchers or [])
        self.budget = budget
        self.recency_window_days = recency_window_days
        self.recency_bonus = recency_bonus

    @classmethod
    def from_config(cls, config, store: Optional[KnowledgeStore] = None) -> 'KnowledgeAggregator':
        default_timeout = float(config.get('knowledge.default_timeout', DEFAULT_TIMEOUT))
        fetchers = []
        for spec in config.get('knowledge.fetchers', []):
            if spec.get('path'):
                spec = dict(spec, path=config.relative_path(spec['path']))
            fetchers.append(make_fetcher(spec, default_timeout))
        if store is None:
            kb_path = config.resolve_path('knowledge.kb_path')
            store = KnowledgeStore.from_jsonl(kb_path) if kb_path else KnowledgeStore()
        return cls(
            store=store,
            fetchers=fetchers,
            budget=int(config.get('knowledge.budget', 5)),
            recency_window_days=float(config.get('knowledge.recency_window_days', DEFAULT_RECENCY_WINDOW_DAYS)),
            recency_bonus=float(config.get('knowledge.recency_bonus', DEFAULT_RECENCY_BONUS)),
        )

    def aggregate(self, entity, question: str, qtype: QuestionType = QuestionType.STATIC,
                  budget: Optional[int] = None, now: Optional[datetime] = None) -> AggregationResult:
        """Gather snippets for ``entity`` and rank them against the question.

        Args:
            entity: EntityHypothesis, or Unknown (which yields no snippets)
            question: The user question
            qtype: Question type, enables the recency bonus for Dynamic
            budget: Maximum snippets returned (defaults to the aggregator's)
            now: Reference time for recency

        Returns:
            AggregationResult with at most ``budget`` snippets
        """
        budget = self.budget if budget is None else budget
        if budget < 1:
            raise ValueError("budget must be at least 1")
        report: Dict[str, Dict[str, Any]] = {}
        if not getattr(entity, 'resolved', False):
            return AggregationResult(snippets=[], report=report)

        name = entity.entity_id
        collected: List[KnowledgeSnippet] = []
        try:
            record = self.store.lookup_local(entity.entity_id)
            name = record.name
            local = local_snippets(record)
            collected.extend(local)
            report[SourceKind.LOCAL_KB.value] = {'status': 'ok', 'count': len(local)}
        except NotFoundError as e:
            report[SourceKind.LOCAL_KB.value] = {'status': 'error', 'count': 0, 'message': str(e)}

        fetched = self._run_fetchers(name, question, report)
        # stable sort keeps fetcher order within a priority
        for _, group in sorted(fetched, key=lambda item: -SOURCE_PRIORITY[item[0]]):
            collected.extend(group)

        seen = set()
        unique = []
        for snippet in collected:
            if snippet.text not in seen:
                seen.add(snippet.text)
                unique.append(snippet)

        scored = [
            replace(s, score=score_snippet(s, question, qtype, now=now,
                                           recency_window_days=self.recency_window_days,
                                           recency_bonus=self.recency_bonus))
            for s in unique
        ]
        scored.sort(key=lambda s: (-s.score, -s.priority, s.text))
        return AggregationResult(snippets=scored[:budget], report=report, entity_name=name)

    def _run_fetchers(self, entity_name: str, question: str,
                      report: Dict[str, Dict[str, Any]]) -> List[Any]:
        """Call every fetcher concurrently; failures go to ``report`` only."""
        if not self.fetchers:
            return []
        names = _unique_names(self.fetchers)
        results = []
        executor = concurrent.futures.ThreadPoolExecutor(max_workers=len(self.fetchers))
        try:
            start = time.monotonic()
            futures = [executor.submit(f.fetch, entity_name, question) for f in self.fetchers]
            for fetcher, name, future in zip(self.fetchers, names, futures):
                timeout = getattr(fetcher, 'timeout', DEFAULT_TIMEOUT)
                remaining = max(0.0, start + timeout - time.monotonic())
                try:
                    snippets = future.result(timeout=remaining)
                except concurrent.futures.TimeoutError:
                    logger.warning("fetcher %s timed out after %.1fs", name, timeout)
                    report[name] = {'status': 'timeout', 'count': 0}
                    continue
                except Exception as e:
                    logger.warning("fetcher %s failed: %s", name, e)
                    report[name] = {'status': 'error', 'count': 0, 'message': str(e)}
                    continue
                if any(s.source_kind != fetcher.source_kind for s in snippets):
                    report[name] = {'status': 'error', 'count': 0,
                                    'message': 'snippets carry a foreign source kind'}
                    continue
                report[name] = {'status': 'ok', 'count': len(snippets)}
                results.append((fetcher.source_kind, snippets))
        finally:
            executor.shutdown(wait=False)
        return results


def _unique_names(fetchers: List[Any]) -> List[str]:
    names = []
    counts: Dict[str, int] = {}
    for fetcher in fetchers:
        base = getattr(fetcher, 'name', None) or SourceKind(fetcher.source_kind).value
        counts[base] = counts.get(base, 0) + 1
        names.append(base if counts[base] == 1 else f"{base}#{counts[base]}")
    return names


def aggregate(entity, question: str, qtype: QuestionType, fetchers: List[Any], budget: int,
              store: Optional[KnowledgeStore] = None, now: Optional[datetime] = None) -> AggregationResult:
    """Functional form of :meth:`KnowledgeAggregator.aggregate`."""
    return KnowledgeAggregator(store=store, fetchers=fetchers, budget=budget).aggregate(
        entity, question, qtype, now=now)
