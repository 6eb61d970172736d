"""Tests for prompt assembly and answer generation."""
import threading

import pytest
import requests

from entity_vqa.errors import GeneratorTimeoutError, GeneratorUnavailableError
from entity_vqa.generation import (
    UNKNOWN_ANSWER,
    HttpGenerator,
    PromptBundle,
    TemplateGenerator,
    assemble_prompt,
    generate,
    generate_many,
    make_generator,
)
from entity_vqa.knowledge import KnowledgeSnippet, SourceKind
from entity_vqa.resolution import EntityHypothesis, Unknown

PARK = EntityHypothesis(entity_id='ent-00', score=2.7, support_count=3)
SUMMARY = KnowledgeSnippet(text='A coastal park in New Zealand.', source_kind=SourceKind.LOCAL_KB, score=1.5)
FACT = KnowledgeSnippet(text='established: 1942', source_kind=SourceKind.LOCAL_KB, score=1.0)


def test_assemble_resolved_bundle():
    bundle = assemble_prompt('Where is this park?', PARK, [SUMMARY, FACT],
                             entity_name='Abel Tasman National Park')

    assert bundle.entity_name == 'Abel Tasman National Park'
    assert [s.text for s in bundle.snippets] == [SUMMARY.text, FACT.text]
    assert bundle.serialize() == (
        'Question: Where is this park?\n'
        'Entity: Abel Tasman National Park\n'
        'Knowledge:\n'
        '[1] (LocalKB) A coastal park in New Zealand.\n'
        '[2] (LocalKB) established: 1942\n'
    )


def test_assemble_unknown_bundle():
    bundle = assemble_prompt('Where is this park?', Unknown(), [])

    assert bundle.entity_name is None
    assert bundle.snippets == []
    assert 'Entity: (unknown)' in bundle.serialize()


def test_serialization_is_deterministic():
    first = assemble_prompt('Where is this park?', PARK, [SUMMARY, FACT], entity_name='Abel Tasman National Park')
    second = assemble_prompt('Where is this park?', PARK, [SUMMARY, FACT], entity_name='Abel Tasman National Park')

    assert first.serialize().encode('utf-8') == second.serialize().encode('utf-8')


def test_token_budget_cuts_snippets_in_rank_order():
    bundle = assemble_prompt('Where?', PARK, [SUMMARY, FACT], token_budget=4)

    assert [s.text for s in bundle.snippets] == ['A coastal park in']

    bundle = assemble_prompt('Where?', PARK, [SUMMARY, FACT], token_budget=7)
    assert [s.text for s in bundle.snippets] == [SUMMARY.text, 'established:']


def test_empty_question_rejected():
    with pytest.raises(ValueError):
        assemble_prompt('  ', PARK, [])


def test_template_generator_answers():
    resolved = assemble_prompt('Where?', PARK, [SUMMARY], entity_name='Abel Tasman National Park')
    answer = generate(resolved, TemplateGenerator())

    assert answer.text == 'This is Abel Tasman National Park. A coastal park in New Zealand.'
    assert answer.provenance == [{'rank': 1, 'source_kind': 'LocalKB', 'text': SUMMARY.text, 'uri': ''}]
    assert answer.generator == 'template'

    unknown = generate(assemble_prompt('Where?', Unknown(), []), TemplateGenerator())
    assert unknown.text == UNKNOWN_ANSWER
    assert unknown.entity_name is None

    bare = generate(assemble_prompt('Where?', PARK, []), TemplateGenerator())
    assert bare.text == 'This is ent-00.'


class EmptyGenerator:
    name = 'empty'

    def generate(self, bundle):
        return '   '


def test_empty_answer_is_a_failure():
    with pytest.raises(GeneratorUnavailableError):
        generate(PromptBundle(question='Where?'), EmptyGenerator())


class Response:
    def __init__(self, payload):
        self.payload = payload

    def raise_for_status(self):
        pass

    def json(self):
        return self.payload


def test_http_generator(monkeypatch):
    seen = {}

    def fake_post(url, json=None, timeout=None):
        seen.update(url=url, json=json, timeout=timeout)
        return Response({'answer': 'It is in New Zealand.'})

    monkeypatch.setattr(requests, 'post', fake_post)
    generator = make_generator('http:localhost:8000', timeout=5.0)
    bundle = assemble_prompt('Where?', PARK, [SUMMARY], entity_name='Abel Tasman National Park')

    answer = generate(bundle, generator)

    assert isinstance(generator, HttpGenerator)
    assert answer.text == 'It is in New Zealand.'
    assert seen == {'url': 'http://localhost:8000/generate', 'json': {'prompt': bundle.serialize()}, 'timeout': 5.0}


def test_http_generator_timeout_surfaces_no_answer(monkeypatch):
    def slow(*args, **kwargs):
        raise requests.Timeout('read timed out')

    monkeypatch.setattr(requests, 'post', slow)

    with pytest.raises(GeneratorTimeoutError):
        generate(PromptBundle(question='Where?'), HttpGenerator('http://localhost:8000', timeout=0.1))


def test_http_generator_unavailable(monkeypatch):
    def refused(*args, **kwargs):
        raise requests.ConnectionError('refused')

    monkeypatch.setattr(requests, 'post', refused)

    with pytest.raises(GeneratorUnavailableError):
        generate(PromptBundle(question='Where?'), HttpGenerator('http://localhost:8000'))


def test_make_generator_specs():
    assert isinstance(make_generator('template'), TemplateGenerator)
    assert isinstance(make_generator(''), TemplateGenerator)
    with pytest.raises(ValueError):
        make_generator('llama')


class CountingGenerator:
    name = 'counting'

    def __init__(self):
        self.lock = threading.Lock()
        self.active = 0
        self.peak = 0
        self.barrier = threading.Event()

    def generate(self, bundle):
        with self.lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        self.barrier.wait(0.05)
        with self.lock:
            self.active -= 1
        return f"answer to {bundle.question}"


def test_generate_many_bounds_concurrency_and_keeps_order():
    generator = CountingGenerator()
    bundles = [PromptBundle(question=f"q{i}") for i in range(10)]

    answers = generate_many(bundles, generator, max_in_flight=3)

    assert [a.text for a in answers] == [f"answer to q{i}" for i in range(10)]
    assert generator.peak <= 3
    assert generate_many([], generator) == []
    with pytest.raises(ValueError):
        generate_many(bundles, generator, max_in_flight=0)
