"""End-to-end answering: detect, embed, retrieve, resolve, gather knowledge, generate."""
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import requests

from entity_vqa.detection import (
    FULL_IMAGE,
    DEFAULT_MIN_CONFIDENCE,
    ImageRef,
    crop,
    detect_regions,
    detection_query,
    make_detector,
    select_primary_region,
)
from entity_vqa.errors import (
    BackendMalformedResponseError,
    BackendUnavailableError,
    EntityVQAError,
    IoFailureError,
    StageError,
)
from entity_vqa.generation import (
    DEFAULT_TOKEN_BUDGET,
    TemplateGenerator,
    assemble_prompt,
    generate,
    make_generator,
)
from entity_vqa.indexer import EmbeddingIndex, PartitionedIndex, RetrievalSet
from entity_vqa.knowledge import AggregationResult, KnowledgeAggregator
from entity_vqa.resolution import ResolutionConfig, Unknown, resolve
from entity_vqa.schema import QuestionType

logger = logging.getLogger(__name__)

STAGES = ('detect', 'crop', 'embed', 'knn', 'resolve', 'aggregate', 'assemble', 'generate')
DEFAULT_IMAGE_SIZE = 224


class FixtureEncoder:
    """Precomputed embeddings keyed by image id.

    A cropped image falls back to its source image's embedding when the crop
    has none of its own.
    """

    def __init__(self, vectors: Dict[str, Sequence[float]], images: Optional[Dict[str, ImageRef]] = None):
        self.vectors = {k: np.asarray(v, dtype=np.float64) for k, v in vectors.items()}
        self.images = dict(images or {})

    @classmethod
    def from_jsonl(cls, path: str) -> 'FixtureEncoder':
        """Load ``{"image_id", "vector", "uri"?, "width"?, "height"?}`` rows."""
        vectors, images = {}, {}
        try:
            with open(path, 'r', encoding='utf-8') as f:
                for line in f:
                    if not line.strip():
                        continue
                    row = json.loads(line)
                    vectors[row['image_id']] = row['vector']
                    images[row['image_id']] = ImageRef(
                        image_id=row['image_id'],
                        uri=row.get('uri', row['image_id']),
                        width=int(row.get('width', DEFAULT_IMAGE_SIZE)),
                        height=int(row.get('height', DEFAULT_IMAGE_SIZE)),
                    )
        except OSError as e:
            raise IoFailureError(f"cannot read encoder fixture {path}: {e}") from e
        except (ValueError, KeyError) as e:
            raise BackendMalformedResponseError(f"bad encoder fixture {path}: {e}") from e
        return cls(vectors, images)

    def image_ref(self, image_id: str) -> ImageRef:
        return self.images.get(image_id) or ImageRef(image_id, image_id, DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE)

    def embed(self, image: ImageRef) -> np.ndarray:
        for key in (image.image_id, image.image_id.split('#', 1)[0]):
            if key in self.vectors:
                return self.vectors[key]
        raise BackendUnavailableError(f"no embedding for image '{image.image_id}'")


class HttpEncoder:
    """Image encoder behind ``POST /embed {image_id, image_uri, width, height} -> {vector}``."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip('/')
        self.timeout = timeout

    def image_ref(self, image_id: str) -> ImageRef:
        return ImageRef(image_id, image_id, DEFAULT_IMAGE_SIZE, DEFAULT_IMAGE_SIZE)

    def embed(self, image: ImageRef) -> np.ndarray:
        try:
            response = requests.post(
                f"{self.base_url}/embed",
                json={'image_id': image.image_id, 'image_uri': image.uri,
                      'width': image.width, 'height': image.height},
                timeout=self.timeout,
            )
            response.raise_for_status()
        except requests.RequestException as e:
            raise BackendUnavailableError(f"encoder at {self.base_url} unavailable: {e}") from e
        try:
            return np.asarray(response.json()['vector'], dtype=np.float64)
        except (ValueError, KeyError, TypeError) as e:
            raise BackendMalformedResponseError(f"encoder response lacks a vector: {e}") from e


def make_encoder(spec: str, timeout: float = 10.0):
    """Build an encoder from ``fixture:<path>`` or ``http:<url>``."""
    scheme, _, target = spec.partition(':')
    if scheme == 'fixture':
        return FixtureEncoder.from_jsonl(target)
    if scheme == 'http' and target:
        return HttpEncoder(target if '://' in target else f"http://{target}", timeout=timeout)
    raise ValueError(f"unknown encoder spec: {spec!r}")


@dataclass
class AskResult:
    """Answer plus the full per-stage trace."""

    answer: str
    entity: Dict[str, Any]
    snippets_used: List[Dict[str, Any]]
    retrieval: Dict[str, Any]
    trace: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'answer': self.answer,
            'entity': self.entity,
            'snippets_used': self.snippets_used,
            'retrieval': self.retrieval,
            'trace': self.trace,
        }


class AnswerPipeline:
    """Runs one image-question pair through every stage, recording each output."""

    def __init__(self, index, encoder, aggregator: Optional[KnowledgeAggregator] = None,
                 generator=None, detector=None,
                 resolution: ResolutionConfig = ResolutionConfig(),
                 detection_enabled: bool = True,
                 min_confidence: float = DEFAULT_MIN_CONFIDENCE,
                 token_budget: int = DEFAULT_TOKEN_BUDGET):
        self.index = index
        self.encoder = encoder
        self.aggregator = aggregator or KnowledgeAggregator()
        self.generator = generator or TemplateGenerator()
        self.detector = detector
        self.resolution = resolution
        self.detection_enabled = detection_enabled
        self.min_confidence = min_confidence
        self.token_budget = token_budget

    @classmethod
    def from_config(cls, config) -> 'AnswerPipeline':
        """Wire every stage from configuration."""
        index = EmbeddingIndex.load(config.resolve_path('index.path'))
        if config.get('index.backend', 'flat') == 'partitioned':
            index = PartitionedIndex(index, n_lists=int(config.get('index.n_lists', 16)),
                                     n_scan=int(config.get('index.n_scan', 4)),
                                     seed=int(config.get('seed', 0)))
        elif config.get('index.backend', 'flat') != 'flat':
            raise ValueError(f"unknown index backend {config.get('index.backend')!r}")
        encoder_spec = config.resolve_backend('encoder.backend')
        if not encoder_spec:
            raise ValueError("encoder.backend must be set (fixture:<path> or http:<url>)")
        return cls(
            index=index,
            encoder=make_encoder(encoder_spec, timeout=float(config.get('encoder.timeout', 10.0))),
            aggregator=KnowledgeAggregator.from_config(config),
            generator=make_generator(config.get('generation.generator', 'template'),
                                     timeout=float(config.get('generation.timeout', 30.0))),
            detector=make_detector(config.resolve_backend('detection.backend'),
                                   timeout=float(config.get('detection.timeout', 10.0))),
            resolution=ResolutionConfig.from_config(config),
            detection_enabled=bool(config.get('detection.enabled', True)),
            min_confidence=float(config.get('detection.min_confidence', DEFAULT_MIN_CONFIDENCE)),
            token_budget=int(config.get('generation.token_budget', DEFAULT_TOKEN_BUDGET)),
        )

    def image_ref(self, image_id: str) -> ImageRef:
        return self.encoder.image_ref(image_id)

    def ask(self, image, question: str, qtype: QuestionType = QuestionType.STATIC,
            now: Optional[datetime] = None, use_retrieval: bool = True) -> AskResult:
        """Answer ``question`` about ``image`` (an ImageRef or image id).

        With ``use_retrieval`` off, knn, resolve and aggregate are skipped and
        the generator sees the question with no entity and no knowledge.

        Raises:
            StageError: naming the first stage that failed
        """
        if isinstance(image, str):
            image = self.image_ref(image)
        trace: Dict[str, Any] = {}

        with _stage('detect'):
            if self.detector is None or not self.detection_enabled:
                box = FULL_IMAGE
                trace['detect'] = {'status': 'skipped', 'proposals': [], 'box': box.to_dict()}
            else:
                query = detection_query(question)
                proposals = detect_regions(image, query, self.detector)
                box = select_primary_region(proposals, self.min_confidence)
                trace['detect'] = {'status': 'ok', 'query': query,
                                   'proposals': [p.to_dict() for p in proposals],
                                   'box': box.to_dict()}

        with _stage('crop'):
            region = crop(image, box)
            trace['crop'] = region.to_dict()

        with _stage('embed'):
            vector = np.asarray(self.encoder.embed(region), dtype=np.float64)
            trace['embed'] = {'image_id': region.image_id, 'dim': int(vector.shape[0]),
                              'vector': vector.tolist()}

        if not use_retrieval:
            retrieval = RetrievalSet()
            hypothesis = Unknown(reason='no-retrieval')
            knowledge = AggregationResult(snippets=[], report={})
            for name in ('knn', 'resolve', 'aggregate'):
                trace[name] = {'status': 'skipped'}
        else:
            with _stage('knn'):
                retrieval = self.index.knn(vector, self.resolution.k)
                trace['knn'] = retrieval.to_dict()

            with _stage('resolve'):
                hypothesis = resolve(retrieval, self.resolution)
                trace['resolve'] = hypothesis.to_dict()

            with _stage('aggregate'):
                knowledge = self.aggregator.aggregate(hypothesis, question, qtype, now=now)
                trace['aggregate'] = knowledge.to_dict()

        with _stage('assemble'):
            bundle = assemble_prompt(question, hypothesis, knowledge.snippets,
                                     entity_name=knowledge.entity_name,
                                     token_budget=self.token_budget)
            trace['assemble'] = dict(bundle.to_dict(), prompt=bundle.serialize())

        with _stage('generate'):
            answer = generate(bundle, self.generator)
            trace['generate'] = answer.to_dict()

        entity = hypothesis.to_dict()
        if hypothesis.resolved:
            entity['name'] = bundle.entity_name
        logger.info("answered %s: %s", image.image_id, entity.get('entity_id', 'unknown'))
        return AskResult(
            answer=answer.text,
            entity=entity,
            snippets_used=answer.provenance,
            retrieval=retrieval.to_dict(),
            trace=trace,
        )


class _stage:
    """Context manager turning a stage's contract errors into StageError."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is None or isinstance(exc, StageError):
            return False
        if isinstance(exc, (EntityVQAError, ValueError, OSError)):
            raise StageError(self.name, exc) from exc
        return False
