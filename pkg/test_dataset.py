"""Tests for dataset curation, QA linting and popularity statistics."""
import json
from datetime import date

import pytest
import requests

from entity_vqa.dataset import (
    EntityManifestRow,
    FilterParams,
    FilterStage,
    ImageRecord,
    PageviewStats,
    QAPair,
    bucket_popularity,
    category_popularity,
    check_anonymity,
    dataset_stats,
    fetch_all_pageviews,
    fetch_pageviews,
    filter_stage,
    lint_qapairs,
    make_pageview_client,
    read_manifest,
    read_pageview_stats,
    read_qapairs,
    run_filters,
    sample_entities,
    write_manifest_csv,
    write_manifest_jsonl,
    write_qapairs,
)
from entity_vqa.dataset.pageviews import (
    WINDOW_DAYS,
    FixturePageviewClient,
    HttpPageviewClient,
    WikimediaPageviewClient,
)
from entity_vqa.errors import (
    ClientUnavailableError,
    DanglingReferenceError,
    InvalidRecordError,
    MalformedResponseError,
    StageOrderError,
    TooFewEntitiesError,
    UnknownStageError,
)
from entity_vqa.fixtures import build_planted_manifest, build_popularity_stats, build_qapairs
from entity_vqa.schema import Bucket, QuestionType


@pytest.fixture
def manifest():
    return build_planted_manifest(min_images=10)


def names(rows):
    return [r.entity_name for r in rows]


# filters

def test_each_stage_removes_its_plants(manifest):
    report = run_filters(manifest, params=FilterParams(min_images=10))

    assert [len(s.removed) for s in report.stages] == [2, 3, 1]
    assert names(report.stages[0].removed) == ['Lost Lighthouse', 'Untitled Sketch']
    assert names(report.stages[1].removed) == ['Girl with a Pearl Earring', 'Pygmy Jerboa', 'Olm']
    assert names(report.stages[2].removed) == ['Jaguar']
    assert len(report.kept) == 6
    assert report.counts_table()[-1] == ['Total', 12, 10, 7, 6]


def test_counts_table_per_category(manifest):
    table = run_filters(manifest).counts_table()

    assert table[0] == ['landmark', 3, 2, 2, 2]
    assert table[1] == ['painting', 3, 2, 1, 1]
    assert ['mammal', 3, 3, 2, 1] in table


def test_filter_stage_reports_per_category_counts(manifest):
    report = filter_stage(manifest, 'wiki-validity')

    assert report.stage == FilterStage.WIKI_VALIDITY
    assert report.per_category_counts['landmark'] == {'kept': 2, 'removed': 1}
    assert report.to_dict()['removed_entities'] == ['Lost Lighthouse', 'Untitled Sketch']


def test_missing_wiki_page_status_is_removed():
    rows = [EntityManifestRow('Ghost Town', 'landmark', wiki_url='https://en.wikipedia.org/wiki/Ghost_Town',
                              wiki_status=404)]

    assert filter_stage(rows, FilterStage.WIKI_VALIDITY).kept == []


def test_image_threshold_boundary():
    rows = [EntityManifestRow('A', 'landmark', 'u', [ImageRecord(f"i{k}") for k in range(10)]),
            EntityManifestRow('B', 'landmark', 'u', [ImageRecord(f"i{k}") for k in range(9)])]

    assert names(filter_stage(rows, 'ImageCount', FilterParams(min_images=10)).kept) == ['A']


def test_filters_are_idempotent(manifest):
    once = run_filters(manifest).kept
    twice = run_filters(once).kept

    assert names(once) == names(twice)


def test_stage_order_and_names(manifest):
    assert len(run_filters(manifest, ['WikiValidity', 'Ambiguity']).kept) == 9
    with pytest.raises(StageOrderError):
        run_filters(manifest, ['Ambiguity', 'WikiValidity'])
    with pytest.raises(StageOrderError):
        run_filters(manifest, ['ImageCount', 'ImageCount'])
    with pytest.raises(UnknownStageError):
        run_filters(manifest, ['Dedup'])


def test_manifest_row_validation():
    with pytest.raises(InvalidRecordError):
        EntityManifestRow('', 'landmark')
    with pytest.raises(InvalidRecordError):
        EntityManifestRow('Thing', 'spaceship')
    assert EntityManifestRow('Thing', 'tool').entity_id == 'Thing'


@pytest.mark.parametrize('suffix', ['csv', 'jsonl'])
def test_manifest_round_trip(tmp_path, manifest, suffix):
    path = str(tmp_path / f"manifest.{suffix}")
    if suffix == 'csv':
        write_manifest_csv(manifest, path)
    else:
        write_manifest_jsonl(manifest, path)

    loaded = read_manifest(path)

    assert [r.to_dict() for r in loaded] == [r.to_dict() for r in manifest]


def test_csv_requires_core_columns(tmp_path):
    path = tmp_path / 'manifest.csv'
    path.write_text('name,category\nEiffel Tower,landmark\n')

    with pytest.raises(InvalidRecordError):
        read_manifest(str(path))


def test_csv_rejects_non_numeric_wiki_status(tmp_path):
    path = tmp_path / 'manifest.csv'
    path.write_text('entity_name,category,wiki_status\nEiffel Tower,landmark,ok\n')

    with pytest.raises(InvalidRecordError) as excinfo:
        read_manifest(str(path))

    assert 'manifest.csv:2' in str(excinfo.value)


def test_manifest_row_parses_string_flags():
    rows = [EntityManifestRow.from_dict({'entity_name': 'Thing', 'category': 'tool',
                                         'ambiguous_flag': flag, 'wiki_status': status})
            for flag, status in (('false', '200'), ('True', 404), (False, None), (1, ''))]

    assert [r.ambiguous_flag for r in rows] == [False, True, False, True]
    assert [r.wiki_status for r in rows] == [200, 404, None, None]
    with pytest.raises(InvalidRecordError):
        EntityManifestRow.from_dict({'entity_name': 'Thing', 'category': 'tool', 'wiki_status': 'n/a'})


# anonymity and QA linting

def test_check_anonymity():
    assert check_anonymity('Where is the attraction located?', 'Abel Tasman National Park').passed

    named = check_anonymity('Is Abel Tasman National Park open in winter?', 'Abel Tasman National Park')
    assert not named.passed
    assert named.span == 'abel tasman national park'

    alias = check_anonymity('Who painted La Gioconda?', 'Mona Lisa', ['La Gioconda'])
    assert alias.span == 'la gioconda'
    assert check_anonymity('Is it a tasmanian park?', 'Tasman').passed
    with pytest.raises(ValueError):
        check_anonymity('Where?', '')


def test_lint_flags_each_problem():
    manifest = [EntityManifestRow('Mona Lisa', 'painting', entity_id='ent-mona', aliases=['La Gioconda'])]
    qapairs = [
        QAPair('ent-mona', 'Where can this artwork be seen?', 'The Mona Lisa hangs in the Louvre.', QuestionType.STATIC),
        QAPair('ent-mona', 'Where is the Mona Lisa?', 'The Mona Lisa is in Paris.', QuestionType.STATIC),
        QAPair('ent-mona', 'Who painted it?', 'Leonardo da Vinci.', QuestionType.STATIC),
        QAPair('ent-mona', '', '', QuestionType.STATIC),
        QAPair('ent-ghost', 'What is it?', 'A ghost.', QuestionType.STATIC),
    ]

    issues = {issue['index']: issue['problems'] for issue in lint_qapairs(qapairs, manifest)}

    assert 0 not in issues
    assert issues[1] == ["question names the entity: 'mona lisa'"]
    assert issues[2] == ['answer does not name the entity']
    assert issues[3] == ['empty question', 'empty answer']
    assert issues[4] == ['unknown entity']


def test_synthetic_qapairs_are_clean(corpus):
    manifest = [EntityManifestRow(r.name, r.category, entity_id=r.entity_id) for r in corpus.records]

    assert lint_qapairs(build_qapairs(corpus), manifest) == []


def test_qapair_file_round_trip(tmp_path, corpus):
    path = str(tmp_path / 'qa.jsonl')
    qapairs = build_qapairs(corpus)

    write_qapairs(qapairs, path)

    assert read_qapairs(path) == qapairs


# statistics

def test_dataset_stats():
    manifest = [
        EntityManifestRow('Eiffel Tower', 'landmark', 'u', [ImageRecord('a'), ImageRecord('b')], entity_id='e1'),
        EntityManifestRow('Mona Lisa', 'painting', 'u', [ImageRecord('c')], entity_id='e2'),
    ]
    qapairs = [
        QAPair('e1', 'Where is it?', 'It is in Paris.', QuestionType.STATIC),
        QAPair('e1', 'How tall?', 'Three hundred metres.', QuestionType.STATIC),
        QAPair('e2', 'Who painted it?', 'Leonardo.', QuestionType.NARRATIVE),
    ]

    stats = dataset_stats(manifest, qapairs)

    assert (stats.n_categories, stats.n_entities, stats.n_qa, stats.n_images) == (2, 2, 3, 3)
    assert stats.avg_answer_tokens == pytest.approx(8 / 3)
    assert stats.per_category['landmark'] == {'entities': 1, 'images': 2, 'qa': 2}
    with pytest.raises(DanglingReferenceError):
        dataset_stats(manifest, [QAPair('e9', 'q', 'a', QuestionType.STATIC)])


def test_sample_entities_covers_every_category(manifest):
    sample = sample_entities(manifest, fraction=0.1, seed=7)

    assert {r.category for r in sample} == {r.category for r in manifest}
    assert len(sample) == 5
    assert names(sample) == names(sample_entities(manifest, fraction=0.1, seed=7))
    assert len(sample_entities(manifest, fraction=1.0)) == len(manifest)
    with pytest.raises(ValueError):
        sample_entities(manifest, fraction=0.0)


# popularity

def test_tertile_buckets():
    stats = build_popularity_stats(per_category=9, seed=0)

    buckets = bucket_popularity(stats)

    for category in ('landmark', 'painting'):
        members = [s for s in stats if s.category == category]
        counts = [sum(1 for s in members if buckets[s.entity_id] == b) for b in (Bucket.HEAD, Bucket.TORSO, Bucket.TAIL)]
        assert counts == [3, 3, 3]
        for s in members:
            expected = Bucket.HEAD if s.mean_views >= 70 else Bucket.TORSO if s.mean_views >= 40 else Bucket.TAIL
            assert buckets[s.entity_id] == expected


def test_tertile_remainder_goes_to_head_then_torso():
    stats = build_popularity_stats(categories=('landmark',), per_category=5, seed=1)

    buckets = list(bucket_popularity(stats).values())

    assert buckets.count(Bucket.HEAD) == 2
    assert buckets.count(Bucket.TORSO) == 2
    assert buckets.count(Bucket.TAIL) == 1


def test_tertiles_need_three_entities():
    with pytest.raises(TooFewEntitiesError):
        bucket_popularity(build_popularity_stats(categories=('food',), per_category=2))


def test_category_popularity():
    table = category_popularity(build_popularity_stats(per_category=3, seed=0))

    assert table['landmark']['entities'] == 3
    assert table['landmark']['average_views'] == pytest.approx(20.0)
    assert table['painting']['total_views'] == (10 + 20 + 30) * WINDOW_DAYS


def test_pageview_stats_validation():
    with pytest.raises(ValueError):
        PageviewStats('e', [1] * 59)
    with pytest.raises(ValueError):
        PageviewStats('e', [-1] + [1] * 59)


def test_fetch_pageviews_contract():
    client = FixturePageviewClient({
        'good': list(range(WINDOW_DAYS)),
        'short': [1] * 30,
        'fractional': [1.5] * WINDOW_DAYS,
        'negative': [-3] + [1] * (WINDOW_DAYS - 1),
    })

    stats = fetch_pageviews('good', client, category='landmark')
    assert stats.mean_views == pytest.approx(29.5)

    for entity in ('short', 'fractional', 'negative'):
        with pytest.raises(MalformedResponseError):
            fetch_pageviews(entity, client)
    with pytest.raises(ClientUnavailableError):
        fetch_pageviews('missing', client)


def test_fetch_all_pageviews_keeps_order(tmp_path):
    table = {f"e{i}": [i] * WINDOW_DAYS for i in range(8)}
    path = tmp_path / 'views.json'
    path.write_text(json.dumps(table))
    client = make_pageview_client(f"fixture:{path}")

    results = fetch_all_pageviews([{'entity_id': f"e{i}", 'category': 'tool'} for i in range(8)], client, max_workers=3)

    assert [s.entity_id for s in results] == [f"e{i}" for i in range(8)]
    assert [s.mean_views for s in results] == [float(i) for i in range(8)]


def test_read_pageview_stats(tmp_path):
    path = tmp_path / 'stats.jsonl'
    stats = build_popularity_stats(per_category=3)
    path.write_text(''.join(json.dumps(s.to_dict()) + '\n' for s in stats))

    loaded = read_pageview_stats(str(path))

    assert [s.to_dict() for s in loaded] == [s.to_dict() for s in stats]


class Response:
    def __init__(self, payload):
        self.payload = payload

    def raise_for_status(self):
        pass

    def json(self):
        return self.payload


def test_http_pageview_client(monkeypatch):
    seen = []

    def fake_get(url, timeout=None):
        seen.append(url)
        return Response({'daily': [5] * WINDOW_DAYS})

    monkeypatch.setattr(requests, 'get', fake_get)
    client = make_pageview_client('http:views.local')

    assert isinstance(client, HttpPageviewClient)
    assert fetch_pageviews('Mona Lisa', client).mean_views == 5.0
    assert seen == ['http://views.local/Mona%20Lisa']


def test_wikimedia_client_fills_missing_days(monkeypatch):
    seen = {}

    def fake_get(url, headers=None, timeout=None):
        seen.update(url=url, headers=headers)
        return Response({'items': [
            {'timestamp': '2024030100', 'views': 120},
            {'timestamp': '2024022000', 'views': 60},
        ]})

    monkeypatch.setattr(requests, 'get', fake_get)
    client = WikimediaPageviewClient(end_date=date(2024, 3, 1))

    views = client.daily_views('Mona Lisa')

    assert len(views) == WINDOW_DAYS
    assert views[-1] == 120
    assert views[-11] == 60
    assert sum(views) == 180
    assert seen['url'].endswith('/en.wikipedia/all-access/user/Mona_Lisa/daily/20240102/20240301')
    assert 'User-Agent' in seen['headers']


def test_pageview_client_failures(monkeypatch):
    def refused(*args, **kwargs):
        raise requests.ConnectionError('refused')

    monkeypatch.setattr(requests, 'get', refused)
    with pytest.raises(ClientUnavailableError):
        HttpPageviewClient('http://views.local').daily_views('x')

    monkeypatch.setattr(requests, 'get', lambda *a, **k: Response({'unexpected': True}))
    with pytest.raises(MalformedResponseError):
        WikimediaPageviewClient(end_date=date(2024, 3, 1)).daily_views('x')
    with pytest.raises(ValueError):
        make_pageview_client('ftp:somewhere')
