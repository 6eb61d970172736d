"""Text-overlap metrics and the deterministic accuracy judge.

All scores are in [0, 1]; scaling to percentages happens only in reports.
"""
import itertools
import math
from collections import Counter
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import requests

from entity_vqa.errors import BackendMalformedResponseError, BackendUnavailableError
from entity_vqa.text import mentions, tokenize

DEFAULT_JUDGE_THRESHOLD = 0.2
EXHAUSTIVE_ALIGNMENT_LIMIT = 5000


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b, start=1):
            if token == other:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l_f1(candidate: str, reference: str) -> float:
    """ROUGE-L F1 from the longest common token subsequence."""
    cand, ref = tokenize(candidate), tokenize(reference)
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _clipped_counts(cand: List[str], refs: List[List[str]], n: int) -> Tuple[int, int]:
    """(clipped matches, candidate n-gram total) for order ``n``."""
    counts = _ngram_counts(cand, n)
    max_ref: Counter = Counter()
    for ref in refs:
        for gram, count in _ngram_counts(ref, n).items():
            if count > max_ref[gram]:
                max_ref[gram] = count
    clipped = sum(min(count, max_ref[gram]) for gram, count in counts.items())
    return clipped, max(0, len(cand) - n + 1)


def _closest_ref_length(cand_len: int, refs: List[List[str]]) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def _combine(matches: List[Tuple[int, int]], cand_len: int, ref_len: int) -> float:
    """Geometric mean of smoothed precisions times the brevity penalty."""
    log_sum = 0.0
    orders = 0
    for n, (clipped, total) in enumerate(matches, start=1):
        if total == 0:
            continue
        if clipped == 0:
            if n == 1:
                return 0.0
            precision = 1.0 / (total + 1)
        else:
            precision = clipped / total
        log_sum += math.log(precision)
        orders += 1
    if orders == 0:
        return 0.0
    penalty = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return math.exp(log_sum / orders) * penalty


def bleu(candidate: str, references: Sequence[str], max_n: int = 4) -> float:
    """Sentence BLEU with effective order min(max_n, |candidate|).

    Orders n >= 2 without a single match use add-one smoothing. The brevity
    penalty uses the reference closest in length (shorter wins ties).
    """
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    if not cand or not refs:
        return 0.0
    orders = min(max_n, len(cand))
    matches = [_clipped_counts(cand, refs, n) for n in range(1, orders + 1)]
    return _combine(matches, len(cand), _closest_ref_length(len(cand), refs))


def corpus_bleu(candidates: Sequence[str], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Corpus BLEU: n-gram statistics and lengths are summed before combining."""
    if len(candidates) != len(references):
        raise ValueError("need one reference list per candidate")
    totals = [[0, 0] for _ in range(max_n)]
    cand_len = 0
    ref_len = 0
    for candidate, refs in zip(candidates, references):
        cand = tokenize(candidate)
        ref_tokens = [tokenize(r) for r in refs]
        if not cand or not ref_tokens:
            continue
        cand_len += len(cand)
        ref_len += _closest_ref_length(len(cand), ref_tokens)
        for n in range(1, max_n + 1):
            clipped, total = _clipped_counts(cand, ref_tokens, n)
            totals[n - 1][0] += clipped
            totals[n - 1][1] += total
    if cand_len == 0:
        return 0.0
    return _combine([tuple(t) for t in totals], cand_len, ref_len)


def _chunks(pairs: List[Tuple[int, int]]) -> int:
    ordered = sorted(pairs)
    chunks = 1
    for (c1, r1), (c2, r2) in zip(ordered, ordered[1:]):
        if c2 != c1 + 1 or r2 != r1 + 1:
            chunks += 1
    return chunks


def _word_options(cand_pos: List[int], ref_pos: List[int]) -> List[List[Tuple[int, int]]]:
    if len(cand_pos) <= len(ref_pos):
        return [list(zip(cand_pos, perm)) for perm in itertools.permutations(ref_pos, len(cand_pos))]
    return [list(zip(perm, ref_pos)) for perm in itertools.permutations(cand_pos, len(ref_pos))]


def _greedy_alignment(cand: List[str], ref: List[str]) -> List[Tuple[int, int]]:
    """Repeatedly take the longest run of unmatched tokens shared by both sides."""
    free_c = [True] * len(cand)
    free_r = [True] * len(ref)
    pairs = []
    while True:
        best = (0, 0, 0)
        for i in range(len(cand)):
            for j in range(len(ref)):
                length = 0
                while (i + length < len(cand) and j + length < len(ref)
                       and free_c[i + length] and free_r[j + length]
                       and cand[i + length] == ref[j + length]):
                    length += 1
                if length > best[0]:
                    best = (length, i, j)
        length, i, j = best
        if length == 0:
            return pairs
        for t in range(length):
            free_c[i + t] = False
            free_r[j + t] = False
            pairs.append((i + t, j + t))


def align(cand: List[str], ref: List[str]) -> List[Tuple[int, int]]:
    """Exact-match alignment with the most matches and, among those, the fewest chunks.

    Small inputs are searched exhaustively; larger ones use the greedy
    longest-run alignment.
    """
    positions: Dict[str, Tuple[List[int], List[int]]] = {}
    for i, tok in enumerate(cand):
        positions.setdefault(tok, ([], []))[0].append(i)
    for j, tok in enumerate(ref):
        if tok in positions:
            positions[tok][1].append(j)
    shared = [(c, r) for c, r in positions.values() if c and r]
    if not shared:
        return []

    size = 1
    for c, r in shared:
        size *= math.perm(max(len(c), len(r)), min(len(c), len(r)))
        if size > EXHAUSTIVE_ALIGNMENT_LIMIT:
            return _greedy_alignment(cand, ref)

    best_pairs: List[Tuple[int, int]] = []
    best_chunks = None
    for combo in itertools.product(*(_word_options(c, r) for c, r in shared)):
        pairs = [p for group in combo for p in group]
        chunks = _chunks(pairs)
        if best_chunks is None or chunks < best_chunks:
            best_pairs, best_chunks = pairs, chunks
    return best_pairs


def meteor_simplified(candidate: str, reference: str) -> float:
    """METEOR restricted to exact unigram matches (no stemming or synonyms)."""
    cand, ref = tokenize(candidate), tokenize(reference)
    pairs = align(cand, ref)
    matches = len(pairs)
    if matches == 0:
        return 0.0
    precision = matches / len(cand)
    recall = matches / len(ref)
    f_mean = 10 * precision * recall / (recall + 9 * precision)
    penalty = 0.5 * (_chunks(pairs) / matches) ** 3
    return f_mean * (1 - penalty)


def token_f1(prediction: str, gold: str) -> float:
    """Bag-of-tokens F1 between two texts."""
    pred, ref = tokenize(prediction), tokenize(gold)
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred)
    recall = overlap / len(ref)
    return 2 * precision * recall / (precision + recall)


class Verdict(str, Enum):
    CORRECT = 'Correct'
    HALLUCINATED = 'Hallucinated'


def judge_answer(example, threshold: float = DEFAULT_JUDGE_THRESHOLD) -> Verdict:
    """Correct iff the prediction names the entity and overlaps the gold answer.

    The entity name or an alias must appear as a contiguous token run, and
    token F1 against the gold answer must reach ``threshold``.
    """
    names = [example.entity_name] + list(example.entity_aliases)
    if not mentions(example.prediction, [n for n in names if n]):
        return Verdict.HALLUCINATED
    if token_f1(example.prediction, example.gold_answer) < threshold:
        return Verdict.HALLUCINATED
    return Verdict.CORRECT


class ExternalJudge:
    """Judge behind ``POST <url> {question, gold, prediction} -> {verdict}``."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout

    def __call__(self, example) -> Verdict:
        try:
            response = requests.post(
                self.url,
                json={'question': example.question, 'gold': example.gold_answer,
                      'prediction': example.prediction},
                timeout=self.timeout,
            )
            response.raise_for_status()
        except requests.RequestException as e:
            raise BackendUnavailableError(f"judge at {self.url} unavailable: {e}") from e
        try:
            return Verdict(response.json()['verdict'])
        except (ValueError, KeyError, TypeError) as e:
            raise BackendMalformedResponseError(f"judge returned an invalid verdict: {e}") from e


def ablation_delta(without: float, with_: float) -> Optional[float]:
    """Relative change in percent, rounded to one decimal; None if ``without`` <= 0."""
    if without <= 0:
        return None
    return round(100.0 * (with_ - without) / without, 1)
