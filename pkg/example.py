"""Example script demonstrating programmatic use of entity-vqa."""
import sys
import tempfile
from pathlib import Path

# Add src to path
sys.path.insert(0, str(Path(__file__).parent / 'src'))

from entity_vqa.detection import FULL_IMAGE
from entity_vqa.evaluation import evaluate, merge_predictions, render_report
from entity_vqa.fixtures import build_synthetic_corpus
from entity_vqa.knowledge import KnowledgeAggregator
from entity_vqa.pipeline import AnswerPipeline
from entity_vqa.resolution import ResolutionConfig


def main():
    """Example of using entity-vqa programmatically."""
    print("🖼️  Entity VQA - Example\n")

    # Build a small synthetic corpus instead of real encoders and a real LLM
    corpus = build_synthetic_corpus(n_entities=6, seed=0)
    index = corpus.index()
    print(f"📚 Indexed {index.get_stats()['count']} images of {len(corpus.records)} entities\n")

    pipeline = AnswerPipeline(
        index=index,
        encoder=corpus.encoder(),
        aggregator=KnowledgeAggregator(store=corpus.store(), budget=3),
        detector=corpus.detector(),
        resolution=ResolutionConfig(k=5, min_score=0.5, min_margin=0.05),
    )

    predictions = []
    for query in corpus.queries:
        result = pipeline.ask(query['image_id'], query['question'])
        box = result.trace['detect']['box']
        region = 'full image' if box == FULL_IMAGE.to_dict() else f"region {box}"
        print(f"❓ {query['image_id']}: {query['question']}")
        print(f"   Entity: {result.entity.get('name', 'unknown')} ({region})")
        print(f"   Answer: {result.answer}\n")
        predictions.append({'example_id': query['example_id'], 'prediction': result.answer})

    report = evaluate(merge_predictions(corpus.gold, predictions))
    print("📊 Evaluation\n")
    print(render_report(report))

    with tempfile.TemporaryDirectory() as directory:
        paths = corpus.write(directory)
        print(f"\n💾 Corpus files would be written as: {', '.join(sorted(Path(p).name for p in paths.values()))}")

    print("\n✨ Example complete!")


if __name__ == '__main__':
    main()
