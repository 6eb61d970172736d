"""Pageview statistics and the clients that fetch them."""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Any, Dict, List, Optional, Sequence
from urllib.parse import quote

import requests

from entity_vqa.errors import ClientUnavailableError, IoFailureError, MalformedResponseError

logger = logging.getLogger(__name__)

WINDOW_DAYS = 60
WIKIMEDIA_API = 'https://wikimedia.org/api/rest_v1/metrics/pageviews/per-article'
USER_AGENT = 'entity-vqa/0.1 (dataset popularity statistics)'


@dataclass
class PageviewStats:
    """Daily views of an entity's wiki page over the last 60 days."""

    entity_id: str
    daily_views: List[int] = field(default_factory=list)
    category: str = ''
    entity_name: str = ''

    def __post_init__(self):
        if len(self.daily_views) != WINDOW_DAYS:
            raise ValueError(f"expected {WINDOW_DAYS} daily values, got {len(self.daily_views)}")
        if any(v < 0 for v in self.daily_views):
            raise ValueError("daily views must be non-negative")
        if not self.entity_name:
            self.entity_name = self.entity_id

    @property
    def mean_views(self) -> float:
        return sum(self.daily_views) / WINDOW_DAYS

    def to_dict(self) -> Dict[str, Any]:
        return {
            'entity_id': self.entity_id,
            'entity_name': self.entity_name,
            'category': self.category,
            'daily_views': list(self.daily_views),
            'mean_views': self.mean_views,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PageviewStats':
        return cls(
            entity_id=data['entity_id'],
            daily_views=[int(v) for v in data['daily_views']],
            category=data.get('category', ''),
            entity_name=data.get('entity_name', ''),
        )


class FixturePageviewClient:
    """Serves daily views from an in-memory table."""

    def __init__(self, table: Optional[Dict[str, Sequence[Any]]] = None):
        self.table = dict(table or {})

    @classmethod
    def from_json(cls, path: str) -> 'FixturePageviewClient':
        """Load ``{"entity_id": [daily views, ...], ...}``."""
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return cls(json.load(f))
        except OSError as e:
            raise IoFailureError(f"cannot read pageview fixture {path}: {e}") from e

    def daily_views(self, entity_id: str) -> Sequence[Any]:
        if entity_id not in self.table:
            raise ClientUnavailableError(f"no pageview data for '{entity_id}'")
        return self.table[entity_id]


class HttpPageviewClient:
    """Service behind ``GET <base>/<entity_id> -> {"daily": [60 integers]}``."""

    def __init__(self, base_url: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip('/')
        self.timeout = timeout

    def daily_views(self, entity_id: str) -> Sequence[Any]:
        url = f"{self.base_url}/{quote(entity_id, safe='')}"
        try:
            response = requests.get(url, timeout=self.timeout)
            response.raise_for_status()
        except requests.RequestException as e:
            raise ClientUnavailableError(f"pageview service unavailable for '{entity_id}': {e}") from e
        try:
            return response.json()['daily']
        except (ValueError, KeyError, TypeError) as e:
            raise MalformedResponseError(f"pageview response for '{entity_id}' lacks 'daily': {e}") from e


class WikimediaPageviewClient:
    """Per-article daily views from the Wikimedia REST API.

    Days the API omits are counted as zero views.
    """

    def __init__(self, project: str = 'en.wikipedia', end_date: Optional[date] = None,
                 timeout: float = 10.0, user_agent: str = USER_AGENT):
        self.project = project
        self.end_date = end_date or (datetime.utcnow().date() - timedelta(days=1))
        self.timeout = timeout
        self.headers = {'User-Agent': user_agent}

    def window(self) -> List[date]:
        start = self.end_date - timedelta(days=WINDOW_DAYS - 1)
        return [start + timedelta(days=offset) for offset in range(WINDOW_DAYS)]

    def daily_views(self, entity_id: str) -> Sequence[Any]:
        days = self.window()
        article = quote(entity_id.replace(' ', '_'), safe='')
        url = (f"{WIKIMEDIA_API}/{self.project}/all-access/user/{article}/daily/"
               f"{days[0]:%Y%m%d}/{days[-1]:%Y%m%d}")
        try:
            response = requests.get(url, headers=self.headers, timeout=self.timeout)
            response.raise_for_status()
        except requests.RequestException as e:
            raise ClientUnavailableError(f"Wikimedia pageviews unavailable for '{entity_id}': {e}") from e
        try:
            by_day = {item['timestamp'][:8]: int(item['views']) for item in response.json()['items']}
        except (ValueError, KeyError, TypeError) as e:
            raise MalformedResponseError(f"unexpected Wikimedia payload for '{entity_id}': {e}") from e
        return [by_day.get(f"{day:%Y%m%d}", 0) for day in days]


def make_pageview_client(spec: str, timeout: float = 10.0):
    """Build a client from ``fixture:<path>``, ``http:<url>`` or ``wikimedia[:<project>]``."""
    scheme, _, target = spec.partition(':')
    if scheme == 'fixture':
        return FixturePageviewClient.from_json(target)
    if scheme == 'http':
        return HttpPageviewClient(target if '://' in target else f"http://{target}", timeout=timeout)
    if scheme == 'wikimedia':
        return WikimediaPageviewClient(project=target or 'en.wikipedia', timeout=timeout)
    raise ValueError(f"unknown pageview client spec: {spec!r}")


def fetch_pageviews(entity_id: str, client, category: str = '', entity_name: str = '') -> PageviewStats:
    """Fetch 60 daily view counts and summarize them.

    Raises:
        ClientUnavailableError: if the client cannot serve the entity
        MalformedResponseError: unless exactly 60 non-negative integers come back
    """
    raw = client.daily_views(entity_id)
    try:
        values = [int(v) for v in raw]
        if any(int(v) != v for v in raw):
            raise ValueError("non-integer view count")
        return PageviewStats(entity_id=entity_id, daily_views=values,
                             category=category, entity_name=entity_name)
    except (TypeError, ValueError) as e:
        raise MalformedResponseError(f"bad pageview series for '{entity_id}': {e}") from e


def fetch_all_pageviews(entities: Sequence[Dict[str, str]], client, max_workers: int = 4) -> List[PageviewStats]:
    """Fetch pageviews for ``[{entity_id, category, entity_name}]`` concurrently; order kept."""
    def fetch(entity):
        return fetch_pageviews(entity['entity_id'], client,
                               category=entity.get('category', ''),
                               entity_name=entity.get('entity_name', ''))

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        results = list(executor.map(fetch, entities))
    logger.info("fetched pageviews for %d entities", len(results))
    return results
