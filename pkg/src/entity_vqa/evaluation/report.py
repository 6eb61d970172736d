"""Evaluation examples, metric reports and ablation tables."""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

from entity_vqa.errors import EmptyEvalSetError, InvalidRecordError, IoFailureError
from entity_vqa.evaluation.metrics import (
    DEFAULT_JUDGE_THRESHOLD,
    Verdict,
    ablation_delta,
    corpus_bleu,
    judge_answer,
    meteor_simplified,
    rouge_l_f1,
)
from entity_vqa.schema import Bucket

logger = logging.getLogger(__name__)

BUCKET_ORDER = (Bucket.HEAD.value, Bucket.TORSO.value, Bucket.TAIL.value)


@dataclass
class EvalExample:
    """One scored row: question, gold answer, entity and the system prediction."""

    question: str
    gold_answer: str
    entity_name: str
    entity_aliases: List[str] = field(default_factory=list)
    prediction: str = ''
    category: str = ''
    bucket: Bucket = Bucket.UNASSIGNED
    example_id: str = ''

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EvalExample':
        try:
            return cls(
                question=data.get('question', ''),
                gold_answer=data['gold_answer'],
                entity_name=data['entity_name'],
                entity_aliases=list(data.get('entity_aliases', [])),
                prediction=data.get('prediction') or '',
                category=data.get('category', ''),
                bucket=Bucket.parse(data.get('bucket') or Bucket.UNASSIGNED.value),
                example_id=str(data.get('example_id', '')),
            )
        except (KeyError, ValueError) as e:
            raise InvalidRecordError(f"malformed eval example: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        return {
            'example_id': self.example_id,
            'question': self.question,
            'gold_answer': self.gold_answer,
            'entity_name': self.entity_name,
            'entity_aliases': list(self.entity_aliases),
            'prediction': self.prediction,
            'category': self.category,
            'bucket': self.bucket.value,
        }


@dataclass
class MetricReport:
    """Aggregate scores; overlap metrics in [0, 1], accuracy in percent.

    ``bleurt`` is never computed and stays None. Hallucination is always
    100 - accuracy, including for reports loaded with :meth:`from_dict`.
    """

    n: int
    rouge_l: float
    bleu: float
    meteor: float
    accuracy: float
    hallucination: float
    bleurt: Optional[float] = None
    per_bucket: Dict[str, 'MetricReport'] = field(default_factory=dict)
    per_category: Dict[str, 'MetricReport'] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n': self.n,
            'rouge_l': self.rouge_l,
            'bleu': self.bleu,
            'meteor': self.meteor,
            'bleurt': self.bleurt,
            'accuracy': self.accuracy,
            'hallucination': self.hallucination,
            'per_bucket': {k: v.to_dict() for k, v in self.per_bucket.items()},
            'per_category': {k: v.to_dict() for k, v in self.per_category.items()},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MetricReport':
        accuracy = float(data['accuracy'])
        return cls(
            n=int(data.get('n', 0)),
            rouge_l=float(data.get('rouge_l', 0.0)),
            bleu=float(data.get('bleu', 0.0)),
            meteor=float(data.get('meteor', 0.0)),
            accuracy=accuracy,
            hallucination=100.0 - accuracy,
            bleurt=data.get('bleurt'),
            per_bucket={k: cls.from_dict(v) for k, v in data.get('per_bucket', {}).items()},
            per_category={k: cls.from_dict(v) for k, v in data.get('per_category', {}).items()},
        )


def _score(examples: Sequence[EvalExample], verdicts: Sequence[Verdict], max_n: int) -> MetricReport:
    n = len(examples)
    correct = sum(1 for v in verdicts if v == Verdict.CORRECT)
    accuracy = 100.0 * correct / n
    return MetricReport(
        n=n,
        rouge_l=math.fsum(rouge_l_f1(e.prediction, e.gold_answer) for e in examples) / n,
        bleu=corpus_bleu([e.prediction for e in examples], [[e.gold_answer] for e in examples], max_n=max_n),
        meteor=math.fsum(meteor_simplified(e.prediction, e.gold_answer) for e in examples) / n,
        accuracy=accuracy,
        hallucination=100.0 - accuracy,
    )


def evaluate(examples: Sequence[EvalExample], judge_threshold: float = DEFAULT_JUDGE_THRESHOLD,
             max_n: int = 4, judge: Optional[Callable[[EvalExample], Verdict]] = None) -> MetricReport:
    """Score a run: overlap metrics, judged accuracy, and bucket/category breakdowns.

    Sentence metrics are averaged; BLEU is corpus-level. Hallucination is the
    complement of accuracy.

    Raises:
        EmptyEvalSetError: if there are no examples
    """
    if not examples:
        raise EmptyEvalSetError("no examples to evaluate")
    if judge is None:
        def judge(example):
            return judge_answer(example, threshold=judge_threshold)
    verdicts = [judge(e) for e in examples]

    report = _score(examples, verdicts, max_n)
    for key_name, target in (('bucket', report.per_bucket), ('category', report.per_category)):
        groups: Dict[str, List[int]] = {}
        for idx, example in enumerate(examples):
            key = example.bucket.value if key_name == 'bucket' else example.category
            if key and key != Bucket.UNASSIGNED.value:
                groups.setdefault(key, []).append(idx)
        for key in sorted(groups, key=_group_order):
            members = groups[key]
            target[key] = _score([examples[i] for i in members], [verdicts[i] for i in members], max_n)
    logger.info("evaluated %d examples: accuracy %.1f", report.n, report.accuracy)
    return report


def _group_order(key: str):
    return (BUCKET_ORDER.index(key) if key in BUCKET_ORDER else len(BUCKET_ORDER), key)


def compare_reports(without: MetricReport, with_: MetricReport) -> List[Dict[str, Any]]:
    """Accuracy and hallucination deltas per bucket (then overall) between two runs."""
    rows = []
    pairs = [(b, without.per_bucket[b], with_.per_bucket[b])
             for b in BUCKET_ORDER if b in without.per_bucket and b in with_.per_bucket]
    pairs.append(('Overall', without, with_))
    for name, before, after in pairs:
        for metric in ('accuracy', 'hallucination'):
            old, new = getattr(before, metric), getattr(after, metric)
            rows.append({
                'bucket': name,
                'metric': metric,
                'without': old,
                'with': new,
                'delta': ablation_delta(old, new),
            })
    return rows


def format_table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """Render rows as an aligned plain-text table (first column left-aligned)."""
    cells = [[str(h) for h in headers]] + [['-' if v is None else str(v) for v in row] for row in rows]
    widths = [max(len(r[c]) for r in cells) for c in range(len(headers))]

    def line(row):
        return '  '.join(v.ljust(widths[c]) if c == 0 else v.rjust(widths[c]) for c, v in enumerate(row))

    rule = '  '.join('-' * w for w in widths)
    return '\n'.join([line(cells[0]), rule] + [line(r) for r in cells[1:]])


def _pct(value: Optional[float]) -> Optional[str]:
    return None if value is None else f"{100.0 * value:.2f}"


def render_report(report: MetricReport) -> str:
    """Overall and per-bucket metrics table (overlap metrics scaled by 100)."""
    headers = ['Split', 'N', 'ROUGE', 'BLEU', 'METEOR', 'BLEURT', 'Acc.', 'Hallu.']

    def row(name, r):
        return [name, r.n, _pct(r.rouge_l), _pct(r.bleu), _pct(r.meteor), r.bleurt,
                f"{r.accuracy:.1f}", f"{r.hallucination:.1f}"]

    rows = [row('Overall', report)] + [row(k, v) for k, v in report.per_bucket.items()]
    rows += [row(k, v) for k, v in report.per_category.items()]
    return format_table(headers, rows)


def render_comparison(rows: Sequence[Dict[str, Any]]) -> str:
    headers = ['Bucket', 'Metric', 'w/o', 'w/', 'Delta (%)']
    body = []
    for r in rows:
        delta = r['delta']
        body.append([r['bucket'], r['metric'], f"{r['without']:.1f}", f"{r['with']:.1f}",
                     None if delta is None else f"{delta:+.1f}"])
    return format_table(headers, body)


def load_examples(path: str) -> List[EvalExample]:
    """Read EvalExample rows from JSONL."""
    return [EvalExample.from_dict(row) for row in read_jsonl(path)]


def merge_predictions(gold: Sequence[EvalExample], predictions: Sequence[Dict[str, Any]]) -> List[EvalExample]:
    """Attach predictions (``{example_id, prediction}``) to gold rows.

    Rows without an id are matched by position; gold rows with no prediction
    keep an empty one.
    """
    by_id = {}
    for position, row in enumerate(predictions):
        by_id[str(row.get('example_id', position))] = row.get('prediction') or ''
    merged = []
    for position, example in enumerate(gold):
        key = example.example_id or str(position)
        merged.append(EvalExample(
            question=example.question,
            gold_answer=example.gold_answer,
            entity_name=example.entity_name,
            entity_aliases=example.entity_aliases,
            prediction=by_id.get(key, example.prediction),
            category=example.category,
            bucket=example.bucket,
            example_id=key,
        ))
    return merged


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    rows = []
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, line in enumerate(f, start=1):
                if line.strip():
                    try:
                        rows.append(json.loads(line))
                    except json.JSONDecodeError as e:
                        raise InvalidRecordError(f"{path}:{line_no}: {e}") from e
    except OSError as e:
        raise IoFailureError(f"cannot read {path}: {e}") from e
    return rows


def write_jsonl(rows: Sequence[Dict[str, Any]], path: str):
    try:
        with open(path, 'w', encoding='utf-8') as f:
            for row in rows:
                f.write(json.dumps(row, ensure_ascii=False) + '\n')
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e
