"""Shared pytest fixtures."""
import sys
from pathlib import Path

import pytest

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / 'src'))

from entity_vqa.fixtures import build_synthetic_corpus  # noqa: E402


@pytest.fixture(scope='session')
def corpus():
    """The 20-entity synthetic corpus (read-only)."""
    return build_synthetic_corpus(n_entities=20, seed=0)


@pytest.fixture
def corpus_dir(corpus, tmp_path):
    """The synthetic corpus written to disk with its config.yaml."""
    return corpus.write(str(tmp_path / 'corpus'))
