"""Region extraction: language-guided detection contract, fixtures and cropping."""
import json
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import requests

from entity_vqa.errors import (
    BackendMalformedResponseError,
    BackendUnavailableError,
    ImageLoadFailureError,
    IoFailureError,
)
from entity_vqa.text import content_tokens

logger = logging.getLogger(__name__)

DEFAULT_MIN_CONFIDENCE = 0.3
_EPS = 1e-9


@dataclass(frozen=True)
class ImageRef:
    """An image known by id and URI, with its pixel dimensions."""

    image_id: str
    uri: str
    width: int
    height: int

    def to_dict(self) -> Dict[str, Any]:
        return {'image_id': self.image_id, 'uri': self.uri,
                'width': self.width, 'height': self.height}


@dataclass(frozen=True)
class BoundingBox:
    """Box in coordinates normalized to the image size."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ('x', 'y', 'w', 'h'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if self.w <= 0 or self.h <= 0:
            raise ValueError("box width and height must be positive")
        if self.x + self.w > 1.0 + _EPS or self.y + self.h > 1.0 + _EPS:
            raise ValueError("box extends past the image edge")

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_dict(self) -> Dict[str, float]:
        return {'x': self.x, 'y': self.y, 'w': self.w, 'h': self.h}


FULL_IMAGE = BoundingBox(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class RegionProposal:
    """A detected region with its label and confidence."""

    box: BoundingBox
    label: str
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        data = self.box.to_dict()
        data.update({'label': self.label, 'confidence': self.confidence})
        return data


def parse_proposal(raw: Dict[str, Any]) -> RegionProposal:
    """Build a proposal from its wire form ``{x, y, w, h, label, confidence}``.

    Raises:
        BackendMalformedResponseError: if a field is missing or out of range
    """
    try:
        box = BoundingBox(float(raw['x']), float(raw['y']), float(raw['w']), float(raw['h']))
        return RegionProposal(box=box, label=str(raw.get('label', '')),
                              confidence=float(raw['confidence']))
    except (KeyError, TypeError, ValueError) as e:
        raise BackendMalformedResponseError(f"invalid proposal {raw!r}: {e}") from e


class FixtureDetector:
    """Detector backed by a table of image_id -> raw proposals.

    Images missing from the table yield no proposals.
    """

    def __init__(self, table: Optional[Dict[str, List[Dict[str, Any]]]] = None):
        self.table = dict(table or {})

    @classmethod
    def from_jsonl(cls, path: str) -> 'FixtureDetector':
        """Load ``{"image_id": ..., "proposals": [...]}`` rows."""
        table = {}
        try:
            with open(path, 'r', encoding='utf-8') as f:
                for line in f:
                    if line.strip():
                        row = json.loads(line)
                        table[row['image_id']] = row.get('proposals', [])
        except OSError as e:
            raise IoFailureError(f"cannot read detector fixture {path}: {e}") from e
        except (ValueError, KeyError) as e:
            raise BackendMalformedResponseError(f"bad detector fixture {path}: {e}") from e
        return cls(table)

    def propose(self, image: ImageRef, query: str) -> List[Dict[str, Any]]:
        return list(self.table.get(image.image_id, []))


class HttpDetector:
    """Live detector reached over ``POST /detect``."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip('/')
        self.timeout = timeout

    def propose(self, image: ImageRef, query: str) -> List[Dict[str, Any]]:
        try:
            response = requests.post(
                f"{self.base_url}/detect",
                json={'image_uri': image.uri, 'query': query},
                timeout=self.timeout,
            )
            response.raise_for_status()
        except requests.RequestException as e:
            raise BackendUnavailableError(f"detector at {self.base_url} unavailable: {e}") from e
        try:
            payload = response.json()
            proposals = payload['proposals']
        except (ValueError, KeyError, TypeError) as e:
            raise BackendMalformedResponseError(f"detector response lacks proposals: {e}") from e
        if not isinstance(proposals, list):
            raise BackendMalformedResponseError("detector 'proposals' is not a list")
        return proposals


def make_detector(spec: str, timeout: float = 10.0):
    """Build a detector from ``fixture:<path>`` or ``http:<url>``; '' gives None."""
    if not spec:
        return None
    scheme, _, target = spec.partition(':')
    if scheme == 'fixture':
        return FixtureDetector.from_jsonl(target)
    if scheme == 'http':
        return HttpDetector(target if '://' in target else f"http://{target}", timeout=timeout)
    raise ValueError(f"unknown detector backend spec: {spec!r}")


def _proposal_order(p: RegionProposal):
    return (-p.confidence, -p.box.area, p.box.y, p.box.x)


def detect_regions(image: ImageRef, query: str, backend) -> List[RegionProposal]:
    """Run the detector and return validated proposals, best first.

    Proposals are sorted by confidence descending, then box area descending,
    then top-left position (y, then x).

    Raises:
        ValueError: if the query is empty
        BackendUnavailableError: if the backend cannot be reached
        BackendMalformedResponseError: if any proposal breaks its invariants
    """
    if not query or not query.strip():
        raise ValueError("detection query must be non-empty")
    proposals = [parse_proposal(raw) for raw in backend.propose(image, query)]
    proposals.sort(key=_proposal_order)
    logger.debug("%d proposals for %s", len(proposals), image.image_id)
    return proposals


def select_primary_region(proposals: List[RegionProposal],
                          min_confidence: float = DEFAULT_MIN_CONFIDENCE) -> BoundingBox:
    """Pick the best proposal at or above ``min_confidence``, else the full image."""
    eligible = [p for p in proposals if p.confidence >= min_confidence]
    if not eligible:
        return FULL_IMAGE
    return min(eligible, key=_proposal_order).box


def crop(image: ImageRef, box: BoundingBox) -> ImageRef:
    """Describe the cropped region as a new image reference.

    Raises:
        ImageLoadFailureError: if the source image has no usable dimensions
    """
    if image.width <= 0 or image.height <= 0:
        raise ImageLoadFailureError(
            f"image {image.image_id} has invalid size {image.width}x{image.height}")
    if box == FULL_IMAGE:
        return image
    width = max(1, int(round(box.w * image.width)))
    height = max(1, int(round(box.h * image.height)))
    return ImageRef(
        image_id=f"{image.image_id}#crop",
        uri=image.uri,
        width=width,
        height=height,
    )


def detection_query(question: str) -> str:
    """Reduce a question to its content words for the detector."""
    tokens = content_tokens(question)
    return ' '.join(tokens) if tokens else question.strip()
