"""Evaluation harness: overlap metrics, judging, agreement statistics and reports."""
from entity_vqa.evaluation.agreement import (
    KendallResult,
    RankingPair,
    fleiss_kappa,
    kendall_tau_b,
    metric_effectiveness,
    tabulate_pairwise,
)
from entity_vqa.evaluation.metrics import (
    ExternalJudge,
    Verdict,
    ablation_delta,
    bleu,
    corpus_bleu,
    judge_answer,
    meteor_simplified,
    rouge_l_f1,
    token_f1,
)
from entity_vqa.evaluation.report import (
    EvalExample,
    MetricReport,
    compare_reports,
    evaluate,
    format_table,
    load_examples,
    merge_predictions,
    render_comparison,
    render_report,
)

__all__ = [
    'KendallResult', 'RankingPair', 'fleiss_kappa', 'kendall_tau_b', 'metric_effectiveness',
    'tabulate_pairwise', 'ExternalJudge', 'Verdict', 'ablation_delta', 'bleu', 'corpus_bleu',
    'judge_answer', 'meteor_simplified', 'rouge_l_f1', 'token_f1', 'EvalExample', 'MetricReport',
    'compare_reports', 'evaluate', 'format_table', 'load_examples', 'merge_predictions',
    'render_comparison', 'render_report',
]
