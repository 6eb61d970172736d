"""Embedding index: captioned image embeddings with exact cosine k-NN retrieval."""
import base64
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from entity_vqa.errors import (
    CorruptHeaderError,
    DimMismatchError,
    DuplicateIdError,
    EmptyIndexError,
    IndexSealedError,
    InvalidRecordError,
    IoFailureError,
    TruncatedPayloadError,
    ZeroVectorError,
)

logger = logging.getLogger(__name__)

MAGIC = b'SNTIDX01'
FORMAT_VERSION = 1
ZERO_NORM = 1e-12

_HEADER = struct.Struct('<8sIIQ')
_ENTRY_ID = struct.Struct('<Q')
_STR_LEN = struct.Struct('<I')


def normalize(vector: Sequence[float]) -> np.ndarray:
    """Scale a vector to unit Euclidean norm.

    Args:
        vector: Sequence of reals with at least one nonzero component

    Returns:
        Unit-norm float32 vector with the same direction

    Raises:
        ZeroVectorError: if the norm is below 1e-12
    """
    v = _as_vector(vector)
    norm = float(np.linalg.norm(v))
    if norm < ZERO_NORM:
        raise ZeroVectorError(f"cannot normalize vector with norm {norm:.3g}")
    return (v / norm).astype(np.float32)


def _as_vector(vector: Sequence[float]) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimMismatchError(f"expected a non-empty 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidRecordError("vector has non-finite components")
    return v


@dataclass(eq=False)
class IndexEntry:
    """One row of the embedding database: an image embedding and its caption."""

    entry_id: int
    vector: np.ndarray
    caption: str
    entity_id: str
    image_uri: str = ''
    source_uri: str = ''

    def __post_init__(self):
        if not isinstance(self.entry_id, (int, np.integer)) or self.entry_id < 0:
            raise InvalidRecordError(f"entry_id must be a non-negative integer, got {self.entry_id!r}")
        self.entry_id = int(self.entry_id)
        if not self.caption:
            raise InvalidRecordError(f"entry {self.entry_id} has an empty caption")
        if not self.entity_id:
            raise InvalidRecordError(f"entry {self.entry_id} has an empty entity_id")
        self.vector = np.asarray(self.vector, dtype=np.float32)

    def __eq__(self, other: Any) -> bool:
        if not isinstance(other, IndexEntry):
            return NotImplemented
        return (
            self.entry_id == other.entry_id
            and self.caption == other.caption
            and self.entity_id == other.entity_id
            and self.image_uri == other.image_uri
            and self.source_uri == other.source_uri
            and self.vector.dtype == other.vector.dtype
            and np.array_equal(self.vector, other.vector)
        )

    def to_json(self) -> Dict[str, Any]:
        """Serialize as a JSONL sidecar row (base64 little-endian float32 vector)."""
        return {
            'entry_id': self.entry_id,
            'vector': base64.b64encode(self.vector.astype('<f4').tobytes()).decode('ascii'),
            'caption': self.caption,
            'entity_id': self.entity_id,
            'image_uri': self.image_uri,
            'source_uri': self.source_uri,
        }

    @classmethod
    def from_json(cls, row: Dict[str, Any]) -> 'IndexEntry':
        """Parse a JSONL sidecar row; ``vector`` may be base64 or a JSON list."""
        try:
            raw = row['vector']
            if isinstance(raw, str):
                vector = np.frombuffer(base64.b64decode(raw), dtype='<f4').astype(np.float32)
            else:
                vector = np.asarray(raw, dtype=np.float32)
            return cls(
                entry_id=int(row['entry_id']),
                vector=vector,
                caption=row.get('caption', ''),
                entity_id=row.get('entity_id', ''),
                image_uri=row.get('image_uri', ''),
                source_uri=row.get('source_uri', ''),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, InvalidRecordError):
                raise
            raise InvalidRecordError(f"malformed index row: {e}") from e


@dataclass(frozen=True)
class SimilarityHit:
    """One element of a retrieval set."""

    entry_id: int
    score: float
    caption: str
    entity_id: str
    image_uri: str = ''

    def to_dict(self) -> Dict[str, Any]:
        return {
            'entry_id': self.entry_id,
            'score': self.score,
            'caption': self.caption,
            'entity_id': self.entity_id,
            'image_uri': self.image_uri,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SimilarityHit':
        return cls(
            entry_id=int(data['entry_id']),
            score=float(data['score']),
            caption=data['caption'],
            entity_id=data['entity_id'],
            image_uri=data.get('image_uri', ''),
        )


@dataclass
class RetrievalSet:
    """Hits ordered by descending score, ties by ascending entry_id."""

    hits: List[SimilarityHit] = field(default_factory=list)
    k: int = 0

    def __len__(self) -> int:
        return len(self.hits)

    @property
    def entry_ids(self) -> List[int]:
        return [hit.entry_id for hit in self.hits]

    def to_dict(self) -> Dict[str, Any]:
        return {'k': self.k, 'hits': [hit.to_dict() for hit in self.hits]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RetrievalSet':
        return cls(hits=[SimilarityHit.from_dict(h) for h in data.get('hits', [])],
                   k=int(data.get('k', 0)))


def rank_candidates(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the top ``k`` scores, descending, ties by ascending id.

    Args:
        scores: float64 scores, one per candidate
        ids: entry ids aligned with ``scores``
        k: number of results wanted

    Returns:
        Array of positions into ``scores``
    """
    n = scores.shape[0]
    if k < n:
        part = np.argpartition(-scores, k - 1)[:k]
        kth = scores[part].min()
        candidates = np.flatnonzero(scores >= kth)
    else:
        candidates = np.arange(n)
    order = np.lexsort((ids[candidates], -scores[candidates]))[:k]
    return candidates[order]


def _check_k(k: int) -> int:
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 1:
        raise ValueError(f"k must be a positive integer, got {k!r}")
    return int(k)


class EmbeddingIndex:
    """Key-value embedding store with exact (flat scan) cosine k-NN.

    Vectors are normalized at insertion so cosine similarity is a dot
    product. The index accepts entries until :meth:`seal` is called; a
    sealed index is immutable and safe to query from many threads.
    """

    def __init__(self, dim: Optional[int] = None):
        """Initialize an empty index.

        Args:
            dim: Vector dimension. If None, fixed by the first entry added
        """
        self.dim = dim
        self._entries: Dict[int, IndexEntry] = {}
        self._sealed = False
        self._matrix: Optional[np.ndarray] = None
        self._ids: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def sealed(self) -> bool:
        return self._sealed

    def add_entry(self, entry: IndexEntry) -> int:
        """Add an entry, storing its vector normalized.

        Args:
            entry: Entry to add

        Returns:
            The entry id

        Raises:
            IndexSealedError: if the index was sealed
            DimMismatchError: if the vector dimension differs from the index
            DuplicateIdError: if the entry id is already present
        """
        stored = IndexEntry(
            entry_id=entry.entry_id,
            vector=normalize(entry.vector),
            caption=entry.caption,
            entity_id=entry.entity_id,
            image_uri=entry.image_uri,
            source_uri=entry.source_uri,
        )
        return self._store(stored)

    def _store(self, entry: IndexEntry) -> int:
        """Insert an already-normalized entry."""
        if self._sealed:
            raise IndexSealedError("index is sealed; no further entries can be added")
        dim = int(entry.vector.shape[0])
        if self.dim is None:
            self.dim = dim
        elif dim != self.dim:
            raise DimMismatchError(f"entry {entry.entry_id} has dim {dim}, index dim is {self.dim}")
        if entry.entry_id in self._entries:
            raise DuplicateIdError(f"entry_id {entry.entry_id} already present")
        self._entries[entry.entry_id] = entry
        self._matrix = None
        self._ids = None
        return entry.entry_id

    def seal(self) -> 'EmbeddingIndex':
        """Freeze the index and build its scan matrix."""
        self._ensure_matrix()
        self._sealed = True
        logger.info("sealed index: %d entries, dim %s", len(self), self.dim)
        return self

    def _ensure_matrix(self):
        if self._matrix is None:
            ordered = self.entries()
            if ordered:
                self._matrix = np.stack([e.vector for e in ordered]).astype(np.float64)
            else:
                self._matrix = np.zeros((0, self.dim or 0), dtype=np.float64)
            self._ids = np.array([e.entry_id for e in ordered], dtype=np.int64)

    def prepare_query(self, query: Sequence[float]) -> np.ndarray:
        """Validate a query and return it unit-normalized in float64."""
        if not self._entries:
            raise EmptyIndexError("cannot query an empty index")
        q = _as_vector(query)
        if q.shape[0] != self.dim:
            raise DimMismatchError(f"query has dim {q.shape[0]}, index dim is {self.dim}")
        norm = float(np.linalg.norm(q))
        if norm < ZERO_NORM:
            raise ZeroVectorError("query vector has zero norm")
        return q / norm

    def knn(self, query: Sequence[float], k: int) -> RetrievalSet:
        """Return the ``k`` entries most cosine-similar to ``query``.

        If ``k`` exceeds the index size every entry is returned.

        Raises:
            EmptyIndexError: if the index holds no entries
            DimMismatchError: if the query dimension differs from the index
        """
        k = _check_k(k)
        q = self.prepare_query(query)
        self._ensure_matrix()
        scores = np.clip(self._matrix @ q, -1.0, 1.0)
        positions = rank_candidates(scores, self._ids, k)
        return self._hits(positions, scores, self._ids, k)

    def knn_batch(self, queries: Iterable[Sequence[float]], k: int) -> List[RetrievalSet]:
        """Run :meth:`knn` for each query, order preserved."""
        return [self.knn(q, k) for q in queries]

    def _hits(self, positions: np.ndarray, scores: np.ndarray, ids: np.ndarray, k: int) -> RetrievalSet:
        hits = []
        for pos in positions:
            entry = self._entries[int(ids[pos])]
            hits.append(SimilarityHit(
                entry_id=entry.entry_id,
                score=float(scores[pos]),
                caption=entry.caption,
                entity_id=entry.entity_id,
                image_uri=entry.image_uri,
            ))
        return RetrievalSet(hits=hits, k=k)

    def get(self, entry_id: int) -> IndexEntry:
        """Get an entry by id (KeyError if absent)."""
        return self._entries[entry_id]

    def entries(self) -> List[IndexEntry]:
        """All entries sorted by entry id."""
        return [self._entries[i] for i in sorted(self._entries)]

    def get_stats(self) -> Dict[str, Any]:
        """Get index statistics.

        Returns:
            Statistics dictionary
        """
        return {
            'count': len(self),
            'dim': self.dim,
            'entities': len({e.entity_id for e in self._entries.values()}),
            'sealed': self._sealed,
        }

    def save(self, path: str):
        """Write the index in the binary SNTIDX01 format.

        Entries are written sorted by id, so the file does not depend on
        insertion order.

        Raises:
            IoFailureError: if the file cannot be written
        """
        chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, self.dim or 0, len(self))]
        for entry in self.entries():
            chunks.append(_ENTRY_ID.pack(entry.entry_id))
            chunks.append(entry.vector.astype('<f4').tobytes())
            for text in (entry.caption, entry.entity_id, entry.image_uri, entry.source_uri):
                encoded = text.encode('utf-8')
                chunks.append(_STR_LEN.pack(len(encoded)))
                chunks.append(encoded)
        payload = b''.join(chunks)

        dir_path = os.path.dirname(os.path.abspath(path))
        try:
            os.makedirs(dir_path, exist_ok=True)
            fd, tmp_path = tempfile.mkstemp(dir=dir_path, suffix='.tmp')
            with os.fdopen(fd, 'wb') as f:
                f.write(payload)
            os.replace(tmp_path, path)
        except OSError as e:
            raise IoFailureError(f"cannot write index to {path}: {e}") from e
        logger.info("saved index with %d entries to %s", len(self), path)

    @classmethod
    def load(cls, path: str) -> 'EmbeddingIndex':
        """Read an index written by :meth:`save`; the result is sealed.

        Raises:
            IoFailureError: if the file cannot be read
            CorruptHeaderError: on bad magic bytes or an unknown version
            TruncatedPayloadError: if the file ends before all entries are read
        """
        try:
            with open(path, 'rb') as f:
                data = f.read()
        except OSError as e:
            raise IoFailureError(f"cannot read index {path}: {e}") from e

        if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
            raise CorruptHeaderError(f"{path} is not an index file (bad magic)")
        reader = _Reader(data)
        _, version, dim, count = _HEADER.unpack(reader.take(_HEADER.size))
        if version != FORMAT_VERSION:
            raise CorruptHeaderError(f"unsupported index version {version}")
        if count and not dim:
            raise CorruptHeaderError("index header declares entries with dim 0")

        index = cls(dim=dim or None)
        vector_bytes = 4 * dim
        for _ in range(count):
            (entry_id,) = _ENTRY_ID.unpack(reader.take(_ENTRY_ID.size))
            vector = np.frombuffer(reader.take(vector_bytes), dtype='<f4').astype(np.float32)
            caption, entity_id, image_uri, source_uri = (reader.take_str() for _ in range(4))
            index._store(IndexEntry(entry_id, vector, caption, entity_id, image_uri, source_uri))
        if reader.remaining:
            logger.warning("ignoring %d trailing bytes in %s", reader.remaining, path)
        return index.seal()

    @classmethod
    def from_jsonl(cls, path: str, dim: Optional[int] = None) -> 'EmbeddingIndex':
        """Bulk-load entries from a JSONL sidecar (unsealed)."""
        index = cls(dim=dim)
        for entry in load_jsonl(path):
            index.add_entry(entry)
        return index


class _Reader:
    """Bounds-checked cursor over a byte payload."""

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self.data) - self.offset

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise TruncatedPayloadError(
                f"payload ends at byte {len(self.data)}, needed {self.offset + n}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def take_str(self) -> str:
        (length,) = _STR_LEN.unpack(self.take(_STR_LEN.size))
        try:
            return self.take(length).decode('utf-8')
        except UnicodeDecodeError as e:
            raise CorruptHeaderError(f"invalid UTF-8 text at byte {self.offset}") from e


def load_jsonl(path: str) -> List[IndexEntry]:
    """Read index entries from a JSONL sidecar.

    Raises:
        IoFailureError: if the file cannot be read
        InvalidRecordError: on a malformed row
    """
    entries = []
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as e:
                    raise InvalidRecordError(f"{path}:{line_no}: {e}") from e
                entries.append(IndexEntry.from_json(row))
    except OSError as e:
        raise IoFailureError(f"cannot read {path}: {e}") from e
    return entries


def write_jsonl(entries: Iterable[IndexEntry], path: str):
    """Write entries as a JSONL sidecar."""
    try:
        with open(path, 'w', encoding='utf-8') as f:
            for entry in entries:
                f.write(json.dumps(entry.to_json(), ensure_ascii=False) + '\n')
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e


class PartitionedIndex:
    """Coarse-quantizer (inverted list) backend over a sealed flat index.

    Entries are grouped by spherical k-means into ``n_lists`` lists; a query
    scans only the ``n_scan`` lists whose centroids are most similar. Scores
    and tie-breaking follow :meth:`EmbeddingIndex.knn`.
    """

    def __init__(self, base: EmbeddingIndex, n_lists: int = 16, n_scan: int = 4,
                 seed: int = 0, n_iter: int = 20):
        if not len(base):
            raise EmptyIndexError("cannot partition an empty index")
        if n_lists < 1 or n_scan < 1:
            raise ValueError("n_lists and n_scan must be positive")
        self.base = base if base.sealed else base.seal()
        self.dim = self.base.dim
        matrix = self.base._matrix
        ids = self.base._ids
        self.n_lists = min(n_lists, matrix.shape[0])
        self.n_scan = min(n_scan, self.n_lists)

        self.centroids = _spherical_kmeans(matrix, self.n_lists, seed, n_iter)
        assignment = np.argmax(matrix @ self.centroids.T, axis=1)
        self._lists = []
        for list_no in range(self.n_lists):
            members = np.flatnonzero(assignment == list_no)
            self._lists.append((matrix[members], ids[members]))
        logger.info("partitioned %d entries into %d lists", matrix.shape[0], self.n_lists)

    def __len__(self) -> int:
        return len(self.base)

    def knn(self, query: Sequence[float], k: int) -> RetrievalSet:
        """Approximate k-NN over the ``n_scan`` closest lists."""
        k = _check_k(k)
        q = self.base.prepare_query(query)
        centroid_scores = self.centroids @ q
        nearest = np.lexsort((np.arange(self.n_lists), -centroid_scores))[:self.n_scan]
        blocks = [self._lists[p] for p in sorted(nearest) if self._lists[p][1].size]
        if not blocks:
            return RetrievalSet(hits=[], k=k)
        matrix = np.concatenate([b[0] for b in blocks])
        ids = np.concatenate([b[1] for b in blocks])
        scores = np.clip(matrix @ q, -1.0, 1.0)
        positions = rank_candidates(scores, ids, k)
        return self.base._hits(positions, scores, ids, k)

    def knn_batch(self, queries: Iterable[Sequence[float]], k: int) -> List[RetrievalSet]:
        return [self.knn(q, k) for q in queries]


def _spherical_kmeans(matrix: np.ndarray, n_lists: int, seed: int, n_iter: int) -> np.ndarray:
    """Unit-norm centroids from cosine k-means (Lloyd iterations)."""
    rng = np.random.default_rng(seed)
    centroids = matrix[rng.choice(matrix.shape[0], size=n_lists, replace=False)].copy()
    for _ in range(n_iter):
        similarity = matrix @ centroids.T
        assignment = np.argmax(similarity, axis=1)
        best = similarity[np.arange(matrix.shape[0]), assignment]
        for list_no in range(n_lists):
            members = assignment == list_no
            if members.any():
                centroid = matrix[members].sum(axis=0)
            else:
                # reseed an empty list with the worst-served point
                worst = int(np.argmin(best))
                centroid = matrix[worst].copy()
                best[worst] = np.inf
            norm = np.linalg.norm(centroid)
            centroids[list_no] = centroid / norm if norm > ZERO_NORM else matrix[rng.integers(matrix.shape[0])]
    return centroids
