"""Tests for the end-to-end answering pipeline."""
import numpy as np
import pytest
import requests

from entity_vqa.config import Config
from entity_vqa.detection import FULL_IMAGE, FixtureDetector, ImageRef
from entity_vqa.errors import BackendUnavailableError, GeneratorUnavailableError, StageError
from entity_vqa.evaluation import compare_reports, evaluate, merge_predictions
from entity_vqa.generation import UNKNOWN_ANSWER, TemplateGenerator
from entity_vqa.indexer import PartitionedIndex
from entity_vqa.knowledge import KnowledgeAggregator
from entity_vqa.pipeline import STAGES, AnswerPipeline, FixtureEncoder, HttpEncoder, make_encoder
from entity_vqa.resolution import ResolutionConfig


@pytest.fixture
def pipeline(corpus):
    return AnswerPipeline(
        index=corpus.index(),
        encoder=corpus.encoder(),
        aggregator=KnowledgeAggregator(store=corpus.store(), budget=3),
        detector=corpus.detector(),
    )


def test_ask_resolves_and_answers(pipeline, corpus):
    query = corpus.queries[1]

    result = pipeline.ask(query['image_id'], query['question'])

    assert result.entity['status'] == 'resolved'
    assert result.entity['entity_id'] == 'ent-01'
    assert result.entity['name'] == 'Eiffel Tower'
    assert result.answer.startswith('This is Eiffel Tower.')
    assert result.snippets_used
    assert list(result.trace) == list(STAGES)


def test_trace_records_every_stage(pipeline, corpus):
    result = pipeline.ask('query-00', corpus.queries[0]['question'])
    trace = result.trace

    assert trace['detect']['status'] == 'ok'
    assert trace['detect']['box'] == {'x': 0.1, 'y': 0.15, 'w': 0.6, 'h': 0.7}
    assert [p['confidence'] for p in trace['detect']['proposals']] == [0.92, 0.12]
    assert trace['crop'] == {'image_id': 'query-00#crop', 'uri': 'queries/query-00.jpg', 'width': 384, 'height': 336}
    assert trace['embed']['dim'] == corpus.dim
    assert len(trace['knn']['hits']) == 5
    assert trace['knn'] == result.retrieval
    assert trace['resolve']['support_count'] == 3
    assert trace['aggregate']['entity_name'] == 'Abel Tasman National Park'
    assert trace['assemble']['prompt'].startswith('Question: ')
    assert trace['generate']['answer'] == result.answer


def test_detection_can_be_disabled(corpus):
    pipeline = AnswerPipeline(corpus.index(), corpus.encoder(),
                              KnowledgeAggregator(store=corpus.store()),
                              detector=corpus.detector(), detection_enabled=False)

    result = pipeline.ask('query-02', corpus.queries[2]['question'])

    assert result.trace['detect'] == {'status': 'skipped', 'proposals': [], 'box': FULL_IMAGE.to_dict()}
    assert result.trace['crop']['image_id'] == 'query-02'
    assert result.entity['entity_id'] == 'ent-02'


def test_low_confidence_regions_fall_back_to_full_image(corpus):
    detector = FixtureDetector({'query-03': [
        {'x': 0.2, 'y': 0.2, 'w': 0.3, 'h': 0.3, 'label': 'thing', 'confidence': 0.1},
    ]})
    pipeline = AnswerPipeline(corpus.index(), corpus.encoder(), detector=detector)

    result = pipeline.ask('query-03', 'What is this?')

    assert result.trace['detect']['box'] == FULL_IMAGE.to_dict()
    assert result.trace['crop']['image_id'] == 'query-03'


def test_unresolvable_query_gets_sentinel_answer(corpus):
    stored = np.asarray(corpus.encoder_rows[0]['vector'])
    encoder = FixtureEncoder({'opposite': -stored},
                             {'opposite': ImageRef('opposite', 'x.jpg', 100, 100)})
    pipeline = AnswerPipeline(corpus.index(), encoder, KnowledgeAggregator(store=corpus.store()),
                              resolution=ResolutionConfig(k=5, min_score=0.9))

    result = pipeline.ask('opposite', 'What is this?')

    assert result.answer == UNKNOWN_ANSWER
    assert result.entity['status'] == 'unknown'
    assert 'name' not in result.entity
    assert result.snippets_used == []


def test_missing_embedding_names_the_stage(pipeline):
    with pytest.raises(StageError) as excinfo:
        pipeline.ask('never-seen', 'What is this?')

    assert excinfo.value.stage == 'embed'
    assert isinstance(excinfo.value.cause, BackendUnavailableError)
    assert excinfo.value.to_dict()['kind'] == 'BackendUnavailable'


def test_empty_question_fails_at_detection(pipeline):
    with pytest.raises(StageError) as excinfo:
        pipeline.ask('query-00', '   ')

    assert excinfo.value.stage == 'detect'


class BrokenGenerator:
    name = 'broken'

    def generate(self, bundle):
        raise GeneratorUnavailableError('model is offline')


def test_generator_failure_names_the_stage(corpus):
    pipeline = AnswerPipeline(corpus.index(), corpus.encoder(), generator=BrokenGenerator())

    with pytest.raises(StageError) as excinfo:
        pipeline.ask('query-04', 'What is this?')

    assert excinfo.value.stage == 'generate'
    assert excinfo.value.to_dict() == {'kind': 'GeneratorUnavailable', 'stage': 'generate',
                                       'message': 'model is offline'}


def test_pipeline_from_config_answers_every_query(corpus_dir, corpus):
    pipeline = AnswerPipeline.from_config(Config(corpus_dir['config']))

    predictions = []
    for query in corpus.queries:
        result = pipeline.ask(query['image_id'], query['question'])
        assert result.entity['entity_id'] == query['entity_id']
        predictions.append({'example_id': query['example_id'], 'prediction': result.answer})

    report = evaluate(merge_predictions(corpus.gold, predictions))
    assert report.accuracy == 100.0
    assert report.hallucination == 0.0
    assert set(report.per_bucket) == {'Head', 'Torso', 'Tail'}


def test_partitioned_backend_from_config(corpus_dir, corpus):
    config = Config(corpus_dir['config'])
    config.set('index.backend', 'partitioned')
    config.set('index.n_lists', 4)
    config.set('index.n_scan', 4)

    pipeline = AnswerPipeline.from_config(config)
    result = pipeline.ask('query-05', corpus.queries[5]['question'])

    assert isinstance(pipeline.index, PartitionedIndex)
    assert result.entity['entity_id'] == 'ent-05'


def test_from_config_requires_encoder(corpus_dir):
    config = Config(corpus_dir['config'])
    config.set('encoder.backend', '')

    with pytest.raises(ValueError):
        AnswerPipeline.from_config(config)


def test_encoder_specs(corpus_dir, monkeypatch):
    encoder = make_encoder(f"fixture:{corpus_dir['encoder']}")
    assert isinstance(encoder, FixtureEncoder)
    assert encoder.image_ref('query-00').width == 640
    assert encoder.image_ref('elsewhere').width == 224

    class Response:
        def raise_for_status(self):
            pass

        def json(self):
            return {'vector': [1.0, 0.0, 0.0]}

    monkeypatch.setattr(requests, 'post', lambda url, json=None, timeout=None: Response())
    http = make_encoder('http:encoder.local')
    assert isinstance(http, HttpEncoder)
    assert http.embed(http.image_ref('img')).tolist() == [1.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        make_encoder('onnx:model')


def test_answering_without_retrieval_skips_knowledge(pipeline, corpus):
    result = pipeline.ask('query-01', corpus.queries[1]['question'], use_retrieval=False)

    assert result.answer == UNKNOWN_ANSWER
    assert result.entity == {'status': 'unknown', 'reason': 'no-retrieval', 'candidates': []}
    assert result.retrieval == {'k': 0, 'hits': []}
    assert result.snippets_used == []
    for stage in ('knn', 'resolve', 'aggregate'):
        assert result.trace[stage] == {'status': 'skipped'}
    assert result.trace['embed']['dim'] == corpus.dim
    assert 'Entity: (unknown)' in result.trace['assemble']['prompt']
    assert list(result.trace) == list(STAGES)


class MemoryGenerator:
    """Answers from its own memory when the prompt names no entity."""

    name = 'memory'

    def __init__(self, memory):
        self.memory = memory
        self.template = TemplateGenerator()

    def generate(self, bundle):
        if bundle.entity_name:
            return self.template.generate(bundle)
        return self.memory.get(bundle.question, UNKNOWN_ANSWER)


def test_retrieval_ablation_deltas_per_bucket(corpus_dir, corpus):
    # head 4/7, torso 2/7, tail 1/6 answered from memory
    remembered = {0, 3, 6, 9, 1, 4, 2}
    questions = {q['example_id']: f"{q['question']} [{q['example_id']}]" for q in corpus.queries}
    memory = {questions[g.example_id]: g.gold_answer
              for position, g in enumerate(corpus.gold) if position in remembered}
    pipeline = AnswerPipeline.from_config(Config(corpus_dir['config']))
    pipeline.generator = MemoryGenerator(memory)

    runs = {}
    for use_retrieval in (False, True):
        predictions = []
        for query in corpus.queries:
            question = query['question'] if use_retrieval else questions[query['example_id']]
            result = pipeline.ask(query['image_id'], question, use_retrieval=use_retrieval)
            predictions.append({'example_id': query['example_id'], 'prediction': result.answer})
        runs[use_retrieval] = evaluate(merge_predictions(corpus.gold, predictions))

    assert runs[False].per_bucket['Head'].accuracy == pytest.approx(400 / 7)
    assert runs[True].accuracy == 100.0
    deltas = {(r['bucket'], r['metric']): r['delta'] for r in compare_reports(runs[False], runs[True])}
    assert deltas[('Head', 'accuracy')] == pytest.approx(75.0, abs=0.05)
    assert deltas[('Torso', 'accuracy')] == pytest.approx(250.0, abs=0.05)
    assert deltas[('Tail', 'accuracy')] == pytest.approx(500.0, abs=0.05)
    assert deltas[('Overall', 'accuracy')] == pytest.approx(185.7, abs=0.05)
    assert deltas[('Head', 'hallucination')] == -100.0
