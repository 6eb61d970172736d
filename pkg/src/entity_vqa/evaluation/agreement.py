"""Rank correlation and inter-annotator agreement statistics."""
import itertools
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import norm

from entity_vqa.errors import DegenerateRankingError, PerfectExpectedAgreementError

EXACT_PVALUE_MAX_N = 8


@dataclass(frozen=True)
class RankingPair:
    """Two rankings over the same items (ties allowed)."""

    first: Sequence[float]
    second: Sequence[float]

    def __post_init__(self):
        if len(self.first) != len(self.second):
            raise ValueError("rankings must have the same length")
        if len(self.first) < 2:
            raise ValueError("rankings need at least two items")


@dataclass(frozen=True)
class KendallResult:
    tau: float
    p_value: float

    def to_dict(self) -> Dict[str, float]:
        return {'tau': self.tau, 'p_value': self.p_value}


def _pair_signs(values: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    return np.sign(values[..., i] - values[..., j]).astype(np.int64)


def _tie_sums(values: np.ndarray):
    _, counts = np.unique(values, return_counts=True)
    t = counts.astype(np.float64)
    return (
        float(np.sum(t * (t - 1) * (2 * t + 5))),
        float(np.sum(t * (t - 1))),
        float(np.sum(t * (t - 1) * (t - 2))),
    )


def kendall_tau_b(pair: RankingPair) -> KendallResult:
    """Kendall's tau-b with a two-sided p-value.

    For up to 8 items the p-value is exact: every permutation of the second
    ranking is enumerated and the share with |S| at least the observed |S|
    is reported. Larger inputs use the normal approximation with the
    tie-corrected variance of S.

    Raises:
        DegenerateRankingError: if either ranking is entirely tied
    """
    x = np.asarray(pair.first, dtype=np.float64)
    y = np.asarray(pair.second, dtype=np.float64)
    n = x.shape[0]
    i, j = np.triu_indices(n, k=1)
    dx = _pair_signs(x, i, j)
    dy = _pair_signs(y, i, j)

    untied_x = int(np.count_nonzero(dx))
    untied_y = int(np.count_nonzero(dy))
    if untied_x == 0 or untied_y == 0:
        raise DegenerateRankingError("a ranking with every item tied has no order")
    s = int(np.dot(dx, dy))
    tau = s / math.sqrt(untied_x * untied_y)

    if n <= EXACT_PVALUE_MAX_N:
        perms = np.array(list(itertools.permutations(y)), dtype=np.float64)
        s_perm = _pair_signs(perms, i, j) @ dx
        p_value = float(np.count_nonzero(np.abs(s_perm) >= abs(s))) / perms.shape[0]
    else:
        vt, tx1, tx2 = _tie_sums(x)
        vu, ty1, ty2 = _tie_sums(y)
        v0 = n * (n - 1) * (2 * n + 5)
        v1 = tx1 * ty1 / (2.0 * n * (n - 1))
        v2 = tx2 * ty2 / (9.0 * n * (n - 1) * (n - 2))
        variance = (v0 - vt - vu) / 18.0 + v1 + v2
        z = s / math.sqrt(variance)
        p_value = float(min(1.0, 2.0 * norm.sf(abs(z))))
    return KendallResult(tau=max(-1.0, min(1.0, tau)), p_value=p_value)


def fleiss_kappa(matrix: Any) -> float:
    """Fleiss' kappa for an items x categories matrix of rating counts.

    Raises:
        ValueError: if counts are negative, non-integer, or rows differ in total
        PerfectExpectedAgreementError: if chance agreement is 1
    """
    data = np.asarray(matrix)
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] == 0:
        raise ValueError("rater matrix must be a non-empty 2-d array")
    if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
        raise ValueError("rater counts must be integers")
    data = data.astype(np.int64)
    if np.any(data < 0):
        raise ValueError("rater counts must be non-negative")
    row_sums = data.sum(axis=1)
    n = int(row_sums[0])
    if np.any(row_sums != n):
        raise ValueError("every item must have the same number of ratings")
    if n < 2:
        raise ValueError("need at least two raters per item")

    n_items = data.shape[0]
    per_item = ((data ** 2).sum(axis=1) - n) / (n * (n - 1))
    observed = float(per_item.mean())
    proportions = data.sum(axis=0) / (n_items * n)
    expected = float(np.sum(proportions ** 2))
    if expected >= 1.0:
        raise PerfectExpectedAgreementError("every rating falls in one category; kappa is undefined")
    return (observed - expected) / (1.0 - expected)


def metric_effectiveness(metric_scores: Mapping[str, Sequence[float]],
                         human_scores: Sequence[float]) -> Dict[str, Optional[KendallResult]]:
    """How well each automatic metric orders systems the way humans do.

    Metrics whose scores are all tied map to None.
    """
    results: Dict[str, Optional[KendallResult]] = {}
    for metric in sorted(metric_scores):
        try:
            results[metric] = kendall_tau_b(RankingPair(metric_scores[metric], human_scores))
        except DegenerateRankingError:
            results[metric] = None
    return results


OUTCOMES = ('win', 'tie', 'lose')


def tabulate_pairwise(records: Sequence[Mapping[str, Any]]) -> Dict[str, Dict[str, float]]:
    """Percent win/tie/lose per system from precomputed human pairwise judgments.

    Each record is ``{"system": name, "outcome": "win" | "tie" | "lose"}``.
    """
    counts: Dict[str, Dict[str, int]] = {}
    for record in records:
        outcome = str(record['outcome']).lower()
        if outcome not in OUTCOMES:
            raise ValueError(f"unknown pairwise outcome {record['outcome']!r}")
        counts.setdefault(record['system'], dict.fromkeys(OUTCOMES, 0))[outcome] += 1

    table: Dict[str, Dict[str, float]] = {}
    for system in sorted(counts):
        total = sum(counts[system].values())
        row: Dict[str, float] = {o: 100.0 * counts[system][o] / total for o in OUTCOMES}
        row['n'] = total
        table[system] = row
    return table


def list_rows(table: Dict[str, Dict[str, float]]) -> List[List[Any]]:
    """Flatten a pairwise table into rows for text rendering."""
    return [[system] + [round(row[o], 1) for o in OUTCOMES] + [int(row['n'])]
            for system, row in table.items()]
