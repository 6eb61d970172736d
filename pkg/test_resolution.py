"""Tests for entity resolution."""
import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entity_vqa.indexer import RetrievalSet, SimilarityHit
from entity_vqa.resolution import (
    EntityHypothesis,
    ResolutionConfig,
    Unknown,
    resolve,
    resolve_batch,
)


def retrieval(*pairs):
    hits = [SimilarityHit(entry_id=i, score=score, caption=f"c{i}", entity_id=entity)
            for i, (entity, score) in enumerate(pairs)]
    return RetrievalSet(hits=hits, k=len(hits))


def test_weighted_vote():
    result = resolve(retrieval(('A', 0.9), ('B', 0.8), ('A', 0.7)),
                     ResolutionConfig(k=5, min_score=0.5, min_margin=0.0))

    assert isinstance(result, EntityHypothesis)
    assert result.entity_id == 'A'
    assert result.score == pytest.approx(1.6)
    assert result.support_count == 2
    assert result.runner_up_score == pytest.approx(0.8)


def test_unanimous_vote():
    result = resolve(retrieval(('A', 0.9), ('A', 0.8), ('A', 0.6)))

    assert result.entity_id == 'A'
    assert result.score == pytest.approx(2.3)
    assert result.runner_up_score == 0.0
    assert result.to_dict()['status'] == 'resolved'


def test_all_hits_filtered():
    result = resolve(retrieval(('A', 0.4), ('B', 0.3)), ResolutionConfig(min_score=0.5))

    assert result == Unknown(reason='no-hits')
    assert not result.resolved


def test_narrow_margin_is_unknown():
    result = resolve(retrieval(('A', 0.9), ('B', 0.88)), ResolutionConfig(min_margin=0.05))

    assert isinstance(result, Unknown)
    assert result.reason == 'margin'
    assert [c['entity_id'] for c in result.candidates] == ['A', 'B']


def test_only_top_k_hits_vote():
    rs = retrieval(('A', 0.9), ('B', 0.85), ('B', 0.84), ('B', 0.83))

    assert resolve(rs, ResolutionConfig(k=1, min_margin=0.0)).entity_id == 'A'
    assert resolve(rs, ResolutionConfig(k=4, min_margin=0.0)).entity_id == 'B'


def test_equal_sums_break_on_best_hit_then_id():
    by_best_hit = resolve(retrieval(('B', 0.75), ('A', 0.5), ('A', 0.25)),
                          ResolutionConfig(min_score=0.0, min_margin=0.0))
    assert by_best_hit.entity_id == 'B'

    by_id = resolve(retrieval(('B', 0.7), ('A', 0.7)), ResolutionConfig(min_margin=0.0))
    assert by_id.entity_id == 'A'


def test_config_validation():
    with pytest.raises(ValueError):
        ResolutionConfig(k=0)
    with pytest.raises(ValueError):
        ResolutionConfig(min_score=1.5)
    with pytest.raises(ValueError):
        ResolutionConfig(min_margin=-0.1)


def test_resolve_batch():
    assert resolve_batch([]) == []

    results = resolve_batch([retrieval(('A', 0.9), ('A', 0.8)), retrieval(('A', 0.1))])
    assert results[0].entity_id == 'A'
    assert isinstance(results[1], Unknown)


def test_resolve_batch_matches_elementwise():
    rng = random.Random(42)
    sets = []
    for _ in range(100):
        pairs = sorted(((rng.choice('ABCD'), round(rng.uniform(0, 1), 3)) for _ in range(rng.randint(0, 6))),
                       key=lambda p: -p[1])
        sets.append(retrieval(*pairs))
    cfg = ResolutionConfig(k=4, min_score=0.3, min_margin=0.1)

    assert resolve_batch(sets, cfg) == [resolve(rs, cfg) for rs in sets]


def test_permuting_equal_score_hits_keeps_result():
    pairs = [('A', 0.8), ('B', 0.8), ('A', 0.6), ('C', 0.8), ('B', 0.55)]
    expected = resolve(retrieval(*pairs), ResolutionConfig(min_margin=0.0))
    rng = random.Random(7)
    for _ in range(10):
        head = pairs[:2] + [pairs[3]]
        rng.shuffle(head)
        shuffled = head + [pairs[2], pairs[4]]
        assert resolve(retrieval(*shuffled), ResolutionConfig(min_margin=0.0)) == expected


def vote_by_enumeration(pairs, cfg):
    """Winner found by checking every entity against every other one."""
    top = [(entity, score) for entity, score in pairs[:cfg.k] if score >= cfg.min_score]
    entities = sorted({entity for entity, _ in top})
    if not entities:
        return 'no-hits'
    votes = {e: math.fsum(s for x, s in top if x == e) for e in entities}
    best = {e: max(s for x, s in top if x == e) for e in entities}

    def beats(a, b):
        return (votes[a], best[a]) > (votes[b], best[b]) or ((votes[a], best[a]) == (votes[b], best[b]) and a < b)

    winners = [e for e in entities if all(beats(e, o) for o in entities if o != e)]
    assert len(winners) == 1
    winner = winners[0]
    runner_up = max((votes[o] for o in entities if o != winner), default=0.0)
    if votes[winner] - runner_up < cfg.min_margin * votes[winner]:
        return 'margin'
    return winner


@pytest.mark.parametrize('n_hits', [1, 2, 3, 4])
@pytest.mark.parametrize('min_margin', [0.0, 0.05, 0.2])
def test_vote_matches_enumeration(n_hits, min_margin):
    cfg = ResolutionConfig(k=3, min_score=0.5, min_margin=min_margin)
    rng = random.Random(n_hits * 100 + int(min_margin * 100))
    for labels in itertools.product('ABC', repeat=n_hits):
        for _ in range(25):
            scores = sorted((rng.randint(0, 10) / 10 for _ in labels), reverse=True)
            pairs = list(zip(labels, scores))

            result = resolve(retrieval(*pairs), cfg)
            expected = vote_by_enumeration(pairs, cfg)

            if expected in ('no-hits', 'margin'):
                assert isinstance(result, Unknown) and result.reason == expected, pairs
            else:
                assert result.entity_id == expected, pairs


@settings(max_examples=200, deadline=None)
@given(
    hits=st.lists(st.tuples(st.sampled_from('ABC'), st.integers(0, 10)), min_size=1, max_size=4),
    raised=st.integers(0, 3),
    step=st.integers(1, 10),
    min_margin=st.sampled_from([0.0, 0.05, 0.2]),
)
def test_raising_a_score_never_crowns_someone_else(hits, raised, step, min_margin):
    cfg = ResolutionConfig(k=4, min_score=0.5, min_margin=min_margin)
    raised %= len(hits)
    boosted = list(hits)
    entity, tenths = boosted[raised]
    boosted[raised] = (entity, min(10, tenths + step))

    def run(pairs):
        ordered = sorted(((e, t / 10) for e, t in pairs), key=lambda p: -p[1])
        return resolve(retrieval(*ordered), cfg)

    before, after = run(hits), run(boosted)

    if after.resolved and after.entity_id != entity:
        assert before.resolved and before.entity_id == after.entity_id
