#!/usr/bin/env python3
"""Test script to verify entity-vqa end to end without any network backend."""
import os
import sys
import tempfile
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / 'src'))

from entity_vqa.adapter import grad_check, make_gradcheck_instance, make_toy_problem, train_adapter
from entity_vqa.config import Config
from entity_vqa.dataset import EntityManifestRow, lint_qapairs, run_filters
from entity_vqa.evaluation import evaluate, merge_predictions, render_report
from entity_vqa.fixtures import build_planted_manifest, build_qapairs, build_synthetic_corpus
from entity_vqa.indexer import EmbeddingIndex
from entity_vqa.pipeline import AnswerPipeline


def test_index_round_trip(corpus):
    """Test saving and reloading the embedding index."""
    print("📚 Testing Embedding Index...\n")

    index = corpus.index()
    with tempfile.TemporaryDirectory() as temp_dir:
        path = os.path.join(temp_dir, 'index.sntidx')
        index.save(path)
        reloaded = EmbeddingIndex.load(path)

    stats = reloaded.get_stats()
    print(f"Entries: {stats['count']}")
    print(f"Entities: {stats['entities']}")
    assert stats['count'] == len(corpus.entries)

    first = corpus.entries[0]
    hits = reloaded.knn(first.vector, 3)
    print(f"Nearest to entry {first.entry_id}: {hits.entry_ids}")
    assert hits.entry_ids[0] == first.entry_id

    print("\n✅ Index test passed!\n")


def test_answering(corpus):
    """Test answering every synthetic query from a written corpus."""
    print("🖼️  Testing Answer Pipeline...\n")

    with tempfile.TemporaryDirectory() as temp_dir:
        paths = corpus.write(temp_dir)
        pipeline = AnswerPipeline.from_config(Config(paths['config']))

        predictions = []
        resolved = 0
        for query in corpus.queries:
            result = pipeline.ask(query['image_id'], query['question'])
            resolved += result.entity.get('entity_id') == query['entity_id']
            predictions.append({'example_id': query['example_id'], 'prediction': result.answer})

    print(f"Resolved: {resolved}/{len(corpus.queries)}")
    print(f"Sample answer: {predictions[0]['prediction']}")
    assert resolved == len(corpus.queries), "Entity resolution failed"

    report = evaluate(merge_predictions(corpus.gold, predictions))
    print()
    print(render_report(report))
    assert report.accuracy == 100.0, "Evaluation failed"

    print("\n✅ Pipeline test passed!\n")


def test_curation(corpus):
    """Test manifest filtering and QA linting."""
    print("🧹 Testing Dataset Curation...\n")

    report = run_filters(build_planted_manifest())
    for stage in report.stages:
        print(f"  {stage.stage.value}: removed {len(stage.removed)}")
    print(f"Kept: {len(report.kept)}")
    assert len(report.kept) == 6, "Filter pipeline failed"

    manifest = [EntityManifestRow(r.name, r.category, entity_id=r.entity_id) for r in corpus.records]
    issues = lint_qapairs(build_qapairs(corpus), manifest)
    print(f"QA issues: {len(issues)}")
    assert not issues, "QA lint failed"

    print("\n✅ Curation test passed!\n")


def test_adapter():
    """Test adapter gradients and training."""
    print("🧠 Testing Modality Adapter...\n")

    params, lm, image, token_ids = make_gradcheck_instance(0)
    error = grad_check(params, lm, image, token_ids)
    print(f"Gradient check relative error: {error:.3g}")
    assert error < 1e-4, "Gradient check failed"

    toy = make_toy_problem(0)
    _, trace = train_adapter(toy.params, toy.lm, toy.dataset, steps=50, lr=0.05)
    print(f"Loss: {trace[0]:.4f} -> {trace[-1]:.4f}")
    assert trace[-1] < trace[0], "Training did not reduce the loss"

    print("\n✅ Adapter test passed!\n")


def main():
    """Run all tests."""
    print("=" * 60)
    print("🧪 Entity VQA - Functionality Tests")
    print("=" * 60 + "\n")

    corpus = build_synthetic_corpus(n_entities=20, seed=0)
    print(f"📁 Built synthetic corpus of {len(corpus.records)} entities\n")

    test_index_round_trip(corpus)
    test_answering(corpus)
    test_curation(corpus)
    test_adapter()

    print("=" * 60)
    print("🎉 All tests passed!")
    print("=" * 60)


if __name__ == '__main__':
    main()
