"""Synthetic corpora for tests, the example script and the ``demo`` command."""
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Tuple

import numpy as np
import yaml

from entity_vqa.dataset import EntityManifestRow, ImageRecord, PageviewStats, QAPair
from entity_vqa.dataset.pageviews import WINDOW_DAYS
from entity_vqa.detection import FixtureDetector, ImageRef
from entity_vqa.evaluation import EvalExample
from entity_vqa.indexer import EmbeddingIndex, IndexEntry, normalize
from entity_vqa.knowledge import EntityRecord, Fact, KnowledgeStore
from entity_vqa.pipeline import FixtureEncoder
from entity_vqa.schema import Bucket, QuestionType

logger = logging.getLogger(__name__)

RETRIEVED_AT = datetime(2024, 1, 15, tzinfo=timezone.utc)

# name, category, summary, (predicate, object) facts
SYNTHETIC_ENTITIES: List[Tuple[str, str, str, Tuple[Tuple[str, str], ...]]] = [
    ('Abel Tasman National Park', 'landmark',
     'Abel Tasman National Park is a coastal wilderness reserve at the north end of the South Island of New Zealand.',
     (('location', 'Tasman District, New Zealand'), ('established', '1942'))),
    ('Eiffel Tower', 'landmark',
     'The Eiffel Tower is a wrought-iron lattice tower on the Champ de Mars in Paris.',
     (('height', '330 metres'), ('completed', '1889'))),
    ('Mona Lisa', 'painting',
     'The Mona Lisa is a half-length portrait painted by Leonardo da Vinci.',
     (('location', 'Louvre Museum, Paris'), ('medium', 'oil on poplar panel'))),
    ('The Starry Night', 'painting',
     'The Starry Night is an oil painting by Vincent van Gogh showing a swirling night sky.',
     (('painted', '1889'), ('location', 'Museum of Modern Art, New York'))),
    ('The Thinker', 'sculpture',
     'The Thinker is a bronze sculpture by Auguste Rodin of a seated nude man deep in thought.',
     (('material', 'bronze'), ('created', '1904'))),
    ('Pad Thai', 'food',
     'Pad Thai is a stir-fried rice noodle dish commonly served as street food in Thailand.',
     (('origin', 'Thailand'), ('main ingredient', 'rice noodles'))),
    ('Durian', 'fruit',
     'Durian is a large spiky tropical fruit known for its strong odour.',
     (('native region', 'Southeast Asia'), ('genus', 'Durio'))),
    ('Romanesco Broccoli', 'vegetable',
     'Romanesco broccoli is an edible flower bud with a fractal spiral form.',
     (('species', 'Brassica oleracea'), ('origin', 'Italy'))),
    ('Red Panda', 'mammal',
     'The red panda is a small arboreal mammal native to the eastern Himalayas.',
     (('diet', 'bamboo'), ('status', 'endangered'))),
    ('Axolotl', 'amphibian',
     'The axolotl is a neotenic salamander that keeps its larval gills throughout life.',
     (('habitat', 'Lake Xochimilco, Mexico'), ('status', 'critically endangered'))),
    ('Monarch Butterfly', 'insect',
     'The monarch butterfly is a milkweed butterfly famous for its long seasonal migration.',
     (('wingspan', '8.9 to 10.2 cm'), ('host plant', 'milkweed'))),
    ('Clownfish', 'fish',
     'The clownfish is a small reef fish that lives among the tentacles of sea anemones.',
     (('habitat', 'Indo-Pacific reefs'), ('family', 'Pomacentridae'))),
    ('Resplendent Quetzal', 'bird',
     'The resplendent quetzal is a brightly coloured bird of the trogon family.',
     (('range', 'Central America'), ('diet', 'wild avocados'))),
    ('Komodo Dragon', 'reptile',
     'The Komodo dragon is the largest living species of lizard.',
     (('location', 'Komodo Island, Indonesia'), ('length', 'up to 3 metres'))),
    ('Theremin', 'instrument',
     'The theremin is an electronic musical instrument played without physical contact.',
     (('inventor', 'Leon Theremin'), ('invented', '1920'))),
    ('Venus Flytrap', 'plant',
     'The Venus flytrap is a carnivorous plant that catches insects with hinged leaves.',
     (('native range', 'the Carolinas'), ('genus', 'Dionaea'))),
    ('Game Boy', 'electronics',
     'The Game Boy is a handheld game console released by Nintendo.',
     (('released', '1989'), ('manufacturer', 'Nintendo'))),
    ('Swiss Army Knife', 'tool',
     'The Swiss Army knife is a pocketknife with several folding blades and tools.',
     (('origin', 'Switzerland'), ('introduced', '1891'))),
    ('Shinkansen', 'transportation',
     'The Shinkansen is a network of high-speed railway lines in Japan.',
     (('opened', '1964'), ('top speed', '320 km/h'))),
    ('Volkswagen Beetle', 'car',
     'The Volkswagen Beetle is a two-door rear-engine economy car.',
     (('manufacturer', 'Volkswagen'), ('production', '1938 to 2003'))),
]

QUESTIONS = {
    'landmark': 'Where is this place located?',
    'painting': 'Where can this artwork be seen?',
    'sculpture': 'What material was this made from?',
    'food': 'Where does this dish come from?',
    'fruit': 'Where does this fruit grow?',
    'vegetable': 'Where does this vegetable come from?',
    'instrument': 'Who invented this instrument?',
    'electronics': 'Who made this device?',
    'tool': 'Where does this come from?',
    'transportation': 'When did this open?',
    'car': 'Who manufactured this car?',
}
DEFAULT_QUESTION = 'Where does this animal live?'
_BUCKETS = (Bucket.HEAD, Bucket.TORSO, Bucket.TAIL)


@dataclass
class SyntheticCorpus:
    """A self-consistent corpus: index entries, knowledge, detections, queries and gold answers.

    Each entity has ``images_per_entity`` indexed images clustered around its
    own direction; every query image embeds to one of its entity's stored
    vectors, so retrieval resolves it by construction.
    """

    records: List[EntityRecord]
    entries: List[IndexEntry]
    encoder_rows: List[Dict[str, Any]]
    detections: List[Dict[str, Any]]
    queries: List[Dict[str, Any]]
    gold: List[EvalExample]
    dim: int = 32
    meta: Dict[str, Any] = field(default_factory=dict)

    def index(self) -> EmbeddingIndex:
        index = EmbeddingIndex(dim=self.dim)
        for entry in self.entries:
            index.add_entry(entry)
        return index.seal()

    def store(self) -> KnowledgeStore:
        return KnowledgeStore(self.records)

    def encoder(self) -> FixtureEncoder:
        return FixtureEncoder(
            {row['image_id']: row['vector'] for row in self.encoder_rows},
            {row['image_id']: ImageRef(row['image_id'], row['uri'], row['width'], row['height'])
             for row in self.encoder_rows},
        )

    def detector(self) -> FixtureDetector:
        return FixtureDetector({row['image_id']: row['proposals'] for row in self.detections})

    def write(self, directory: str) -> Dict[str, str]:
        """Write every artifact plus a ``config.yaml`` wired to them; returns their paths."""
        os.makedirs(directory, exist_ok=True)
        paths = {
            'index': os.path.join(directory, 'index.sntidx'),
            'kb': os.path.join(directory, 'kb.jsonl'),
            'encoder': os.path.join(directory, 'encoder.jsonl'),
            'detections': os.path.join(directory, 'detections.jsonl'),
            'queries': os.path.join(directory, 'queries.jsonl'),
            'gold': os.path.join(directory, 'gold.jsonl'),
            'entries': os.path.join(directory, 'entries.jsonl'),
            'config': os.path.join(directory, 'config.yaml'),
        }
        self.index().save(paths['index'])
        KnowledgeStore(self.records).save_jsonl(paths['kb'])
        _write_jsonl(self.encoder_rows, paths['encoder'])
        _write_jsonl(self.detections, paths['detections'])
        _write_jsonl(self.queries, paths['queries'])
        _write_jsonl([e.to_dict() for e in self.gold], paths['gold'])
        _write_jsonl([e.to_json() for e in self.entries], paths['entries'])
        config = {
            'seed': self.meta.get('seed', 0),
            'index': {'path': 'index.sntidx', 'backend': 'flat'},
            'detection': {'enabled': True, 'backend': 'fixture:detections.jsonl'},
            'encoder': {'backend': 'fixture:encoder.jsonl'},
            'knowledge': {'kb_path': 'kb.jsonl'},
            'generation': {'generator': 'template'},
        }
        with open(paths['config'], 'w', encoding='utf-8') as f:
            yaml.safe_dump(config, f, default_flow_style=False, sort_keys=False)
        logger.info("wrote synthetic corpus of %d entities to %s", len(self.records), directory)
        return paths


def build_synthetic_corpus(n_entities: int = 20, dim: int = 32, images_per_entity: int = 3,
                           seed: int = 0, noise: float = 0.05) -> SyntheticCorpus:
    """Build the synthetic corpus for ``n_entities`` (at most 20) entities."""
    if not 1 <= n_entities <= len(SYNTHETIC_ENTITIES):
        raise ValueError(f"n_entities must be in [1, {len(SYNTHETIC_ENTITIES)}]")
    if images_per_entity < 1:
        raise ValueError("images_per_entity must be at least 1")
    rng = np.random.default_rng(seed)
    records, entries, encoder_rows, detections, queries, gold = [], [], [], [], [], []

    for position, (name, category, summary, facts) in enumerate(SYNTHETIC_ENTITIES[:n_entities]):
        entity_id = f"ent-{position:02d}"
        slug = name.replace(' ', '_')
        records.append(EntityRecord(
            entity_id=entity_id,
            name=name,
            category=category,
            summary=summary,
            facts=[Fact(predicate, obj, source_uri=f"https://en.wikipedia.org/wiki/{slug}",
                        retrieved_at=RETRIEVED_AT) for predicate, obj in facts],
        ))
        centre = rng.standard_normal(dim)
        for j in range(images_per_entity):
            vector = normalize(centre + noise * rng.standard_normal(dim))
            entries.append(IndexEntry(
                entry_id=position * images_per_entity + j,
                vector=vector,
                caption=f"{name} ({category}) image {j + 1}",
                entity_id=entity_id,
                image_uri=f"images/{entity_id}/{j}.jpg",
                source_uri=f"https://en.wikipedia.org/wiki/{slug}",
            ))

        image_id = f"query-{position:02d}"
        stored = entries[-images_per_entity + int(rng.integers(images_per_entity))]
        encoder_rows.append({
            'image_id': image_id,
            'uri': f"queries/{image_id}.jpg",
            'width': 640,
            'height': 480,
            'vector': stored.vector.astype(np.float64).tolist(),
        })
        detections.append({'image_id': image_id, 'proposals': [
            {'x': 0.1, 'y': 0.15, 'w': 0.6, 'h': 0.7, 'label': category, 'confidence': 0.92},
            {'x': 0.0, 'y': 0.0, 'w': 0.3, 'h': 0.2, 'label': 'background', 'confidence': 0.12},
        ]})
        question = QUESTIONS.get(category, DEFAULT_QUESTION)
        example_id = f"q-{position:02d}"
        queries.append({'example_id': example_id, 'image_id': image_id,
                        'question': question, 'entity_id': entity_id})
        gold.append(EvalExample(
            question=question,
            gold_answer=f"This is {name}. {summary}",
            entity_name=name,
            category=category,
            bucket=_BUCKETS[position % 3],
            example_id=example_id,
        ))

    return SyntheticCorpus(records=records, entries=entries, encoder_rows=encoder_rows,
                           detections=detections, queries=queries, gold=gold, dim=dim,
                           meta={'seed': seed, 'images_per_entity': images_per_entity})


def build_planted_manifest(min_images: int = 10) -> List[EntityManifestRow]:
    """Manifest with known defects: 2 rows lack a wiki URL, 3 have too few images, 1 is ambiguous.

    Every planted row carries exactly one defect and 6 more rows are clean, so
    each filter stage removes only its own plants.
    """
    def images(name, count):
        slug = name.lower().replace(' ', '_')
        return [ImageRecord(f"https://img.example/{slug}/{i}.jpg",
                            f"https://en.wikipedia.org/wiki/{slug}", f"{slug}_{i}.jpg")
                for i in range(count)]

    def row(name, category, wiki=True, n_images=min_images, ambiguous=False):
        slug = name.replace(' ', '_')
        return EntityManifestRow(
            entity_name=name,
            category=category,
            wiki_url=f"https://en.wikipedia.org/wiki/{slug}" if wiki else '',
            image_records=images(name, n_images),
            ambiguous_flag=ambiguous,
        )

    return [
        row('Eiffel Tower', 'landmark'),
        row('Big Ben', 'landmark'),
        row('Lost Lighthouse', 'landmark', wiki=False),
        row('Mona Lisa', 'painting'),
        row('Untitled Sketch', 'painting', wiki=False),
        row('Girl with a Pearl Earring', 'painting', n_images=min_images - 1),
        row('Red Panda', 'mammal'),
        row('Pygmy Jerboa', 'mammal', n_images=2),
        row('Jaguar', 'mammal', ambiguous=True),
        row('Axolotl', 'amphibian'),
        row('Olm', 'amphibian', n_images=0),
        row('Theremin', 'instrument', n_images=min_images + 5),
    ]


def build_popularity_stats(categories=('landmark', 'painting'), per_category: int = 9,
                           seed: int = 0) -> List[PageviewStats]:
    """Pageview stats with distinct means, ``per_category`` entities per category."""
    rng = np.random.default_rng(seed)
    stats = []
    for category in categories:
        levels = rng.permutation(per_category)
        for i, level in enumerate(levels):
            daily = [int(10 * (level + 1))] * WINDOW_DAYS
            stats.append(PageviewStats(entity_id=f"{category}-{i}", daily_views=daily,
                                       category=category, entity_name=f"{category.title()} {i}"))
    return stats


def build_qapairs(corpus: SyntheticCorpus) -> List[QAPair]:
    """One QA pair per corpus entity, from the gold answers."""
    return [QAPair(entity_id=q['entity_id'], question=g.question, answer=g.gold_answer,
                   qtype=QuestionType.STATIC, image_id=q['image_id'])
            for q, g in zip(corpus.queries, corpus.gold)]


def _write_jsonl(rows, path: str):
    with open(path, 'w', encoding='utf-8') as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + '\n')
