"""Answer generation: prompt assembly and generator backends."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional

import requests

from entity_vqa.errors import GeneratorTimeoutError, GeneratorUnavailableError
from entity_vqa.knowledge import KnowledgeSnippet

logger = logging.getLogger(__name__)

DEFAULT_TOKEN_BUDGET = 512
DEFAULT_TEMPLATE_ID = 'entity-grounded-v1'
UNKNOWN_ANSWER = 'I could not identify the entity.'


@dataclass
class PromptBundle:
    """Everything the generator receives for one question."""

    question: str
    entity_name: Optional[str] = None
    snippets: List[KnowledgeSnippet] = field(default_factory=list)
    template_id: str = DEFAULT_TEMPLATE_ID

    def __post_init__(self):
        if not self.question or not self.question.strip():
            raise ValueError("question must be non-empty")

    def serialize(self) -> str:
        """Render the prompt: question, entity line, then numbered snippets."""
        lines = [f"Question: {self.question.strip()}"]
        lines.append(f"Entity: {self.entity_name if self.entity_name else '(unknown)'}")
        if self.snippets:
            lines.append('Knowledge:')
            for number, snippet in enumerate(self.snippets, start=1):
                lines.append(f"[{number}] ({snippet.source_kind.value}) {snippet.text}")
        return '\n'.join(lines) + '\n'

    def to_dict(self) -> Dict[str, Any]:
        return {
            'question': self.question,
            'entity_name': self.entity_name,
            'template_id': self.template_id,
            'snippets': [s.to_dict() for s in self.snippets],
        }


@dataclass
class Answer:
    """Generated answer plus the snippets it was given."""

    text: str
    entity_name: Optional[str]
    provenance: List[Dict[str, Any]]
    generator: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            'answer': self.text,
            'entity_name': self.entity_name,
            'provenance': self.provenance,
            'generator': self.generator,
        }


def assemble_prompt(question: str, hypothesis, snippets: List[KnowledgeSnippet],
                    entity_name: Optional[str] = None,
                    token_budget: int = DEFAULT_TOKEN_BUDGET,
                    template_id: str = DEFAULT_TEMPLATE_ID) -> PromptBundle:
    """Fuse question, entity and ranked snippets into a prompt bundle.

    The entity name is set only for a resolved hypothesis (``entity_name``
    overrides the hypothesis id). Snippet text is cut to ``token_budget``
    whitespace tokens in rank order; snippets past the budget are dropped.
    """
    name = None
    if hypothesis is not None and getattr(hypothesis, 'resolved', False):
        name = entity_name or hypothesis.entity_id

    kept = []
    remaining = token_budget
    for snippet in snippets:
        if remaining <= 0:
            break
        words = snippet.text.split()
        if len(words) > remaining:
            snippet = replace(snippet, text=' '.join(words[:remaining]))
            remaining = 0
        else:
            remaining -= len(words)
        kept.append(snippet)
    return PromptBundle(question=question, entity_name=name, snippets=kept, template_id=template_id)


class TemplateGenerator:
    """Deterministic offline generator: names the entity and quotes the top snippet."""

    name = 'template'

    def generate(self, bundle: PromptBundle) -> str:
        if not bundle.entity_name:
            return UNKNOWN_ANSWER
        if not bundle.snippets:
            return f"This is {bundle.entity_name}."
        return f"This is {bundle.entity_name}. {bundle.snippets[0].text}"


class HttpGenerator:
    """Language model behind ``POST /generate {prompt} -> {answer}``."""

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip('/')
        self.timeout = timeout
        self.name = f"http:{self.base_url}"

    def generate(self, bundle: PromptBundle) -> str:
        try:
            response = requests.post(
                f"{self.base_url}/generate",
                json={'prompt': bundle.serialize()},
                timeout=self.timeout,
            )
            response.raise_for_status()
            answer = response.json().get('answer', '')
        except requests.Timeout as e:
            raise GeneratorTimeoutError(f"generator exceeded {self.timeout}s") from e
        except requests.RequestException as e:
            raise GeneratorUnavailableError(f"generator at {self.base_url} unavailable: {e}") from e
        except (ValueError, AttributeError) as e:
            raise GeneratorUnavailableError(f"generator returned a malformed payload: {e}") from e
        return answer if isinstance(answer, str) else ''


def make_generator(spec: str = 'template', timeout: float = 30.0):
    """Build a generator from ``template`` or ``http:<url>``."""
    if not spec or spec == 'template':
        return TemplateGenerator()
    scheme, _, target = spec.partition(':')
    if scheme == 'http' and target:
        return HttpGenerator(target if '://' in target else f"http://{target}", timeout=timeout)
    raise ValueError(f"unknown generator spec: {spec!r}")


def generate(bundle: PromptBundle, generator) -> Answer:
    """Produce an answer with provenance of the supplied snippets.

    Raises:
        GeneratorUnavailableError: if the backend fails or answers with nothing
        GeneratorTimeoutError: if the backend exceeds its timeout
    """
    text = generator.generate(bundle)
    if not text or not text.strip():
        raise GeneratorUnavailableError("generator returned an empty answer")
    provenance = [
        {'rank': rank, 'source_kind': s.source_kind.value, 'text': s.text, 'uri': s.uri}
        for rank, s in enumerate(bundle.snippets, start=1)
    ]
    return Answer(text=text.strip(), entity_name=bundle.entity_name, provenance=provenance,
                  generator=getattr(generator, 'name', type(generator).__name__))


def generate_many(bundles: List[PromptBundle], generator, max_in_flight: int = 4) -> List[Answer]:
    """Generate for many bundles with at most ``max_in_flight`` concurrent calls.

    Results follow input order. The first failure is raised.
    """
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be at least 1")
    if not bundles:
        return []
    with ThreadPoolExecutor(max_workers=max_in_flight) as executor:
        return list(executor.map(lambda b: generate(b, generator), bundles))
