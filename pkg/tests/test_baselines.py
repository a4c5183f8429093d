import numpy as np
import pytest

from fedseq.baselines import (
    FactorizationPredictor,
    MFUPredictor,
    MRUPredictor,
    RandomPredictor,
    SRPredictor,
    make_baseline,
)
from fedseq.ingest import Event
from fedseq.seqmf import Hyperparams


def events(user, apps, t0=0, gap=10):
    return [Event(user, app, t0 + i * gap) for i, app in enumerate(apps)]


# --- sequential rules ---------------------------------------------------------


def test_sr_scores_raw_counts():
    sr = SRPredictor(pooled=True)
    sr.fit(events(0, [0, 1, 0, 1, 0, 2]))  # 0->1 twice, 1->0 twice, 0->2 once
    scores = sr.score(0, [0], candidates=[1, 2])
    np.testing.assert_array_equal(scores, [2.0, 1.0])


def test_sr_cold_start_is_zero():
    sr = SRPredictor(pooled=True)
    sr.fit(events(0, [0, 1]))
    np.testing.assert_array_equal(sr.score(0, [5], [0, 1]), [0.0, 0.0])
    np.testing.assert_array_equal(sr.score(0, [], [0, 1]), [0.0, 0.0])


def test_sr_pools_across_users():
    pooled = SRPredictor(pooled=True)
    pooled.fit(events(0, [0, 1]) + events(1, [0, 1, 0, 1], t0=1000))
    # user transitions never chain across users
    np.testing.assert_array_equal(pooled.score(7, [0], [1]), [3.0])

    per_user = SRPredictor(pooled=False)
    per_user.fit(events(0, [0, 1]) + events(1, [0, 1, 0, 1], t0=1000))
    np.testing.assert_array_equal(per_user.score(0, [0], [1]), [1.0])
    np.testing.assert_array_equal(per_user.score(1, [0], [1]), [2.0])


def test_sr_single_user_equals_on_device():
    stream = events(3, [0, 1, 2, 0, 1, 2, 1])
    pooled = SRPredictor(pooled=True)
    local = SRPredictor(pooled=False)
    pooled.fit(stream)
    local.fit(stream)
    for last in (0, 1, 2):
        np.testing.assert_array_equal(
            pooled.score(3, [last], [0, 1, 2]), local.score(3, [last], [0, 1, 2])
        )


# --- most recently used ---------------------------------------------------------


def test_mru_recency_rule():
    mru = MRUPredictor()
    scores = mru.score(0, [0, 1, 2], candidates=[0, 1, 2, 3])
    np.testing.assert_allclose(scores, [1 / 3, 1 / 2, 1.0, 0.0])


def test_mru_empty_session():
    mru = MRUPredictor()
    np.testing.assert_array_equal(mru.score(0, [], [0, 1]), [0.0, 0.0])


def test_mru_distinct_recency_with_repeats():
    # session (a, a, b): b is the most recent distinct app, a the second
    mru = MRUPredictor()
    scores = mru.score(0, [0, 0, 1], candidates=[0, 1])
    np.testing.assert_allclose(scores, [0.5, 1.0])


# --- most frequently used ----------------------------------------------------------


def test_mfu_counts():
    mfu = MFUPredictor()
    mfu.fit(events(0, [0] * 5 + [1] * 2))
    np.testing.assert_array_equal(mfu.score(0, [], [0, 1, 2]), [5.0, 2.0, 0.0])


def test_mfu_new_user_zero():
    mfu = MFUPredictor()
    np.testing.assert_array_equal(mfu.score(9, [], [0, 1]), [0.0, 0.0])


def test_mfu_incremental_update():
    mfu = MFUPredictor()
    mfu.fit(events(0, [0, 1]))
    before = mfu.score(0, [], [0, 1]).copy()
    mfu.update(events(0, [1], t0=99))
    after = mfu.score(0, [], [0, 1])
    np.testing.assert_array_equal(after - before, [0.0, 1.0])


# --- random -------------------------------------------------------------------------


def test_random_deterministic_under_seed():
    a = RandomPredictor(seed=4).score(0, [], [0, 1, 2])
    b = RandomPredictor(seed=4).score(0, [], [0, 1, 2])
    np.testing.assert_array_equal(a, b)


def test_random_single_candidate_always_hits():
    from fedseq.seqmf import toprec

    predictor = RandomPredictor(seed=0)
    for _ in range(20):
        ranked = toprec([7], predictor.score(0, [], [7]), 1)
        assert ranked[0] == 7


def test_random_hit_rate_matches_uniform_expectation():
    # HR@1 over c equally likely candidates concentrates around 1/c
    rng = np.random.default_rng(0)
    predictor = RandomPredictor(seed=1)
    c, n_events = 8, 4000
    hits = 0
    for _ in range(n_events):
        target = int(rng.integers(0, c))
        scores = predictor.score(0, [], list(range(c)))
        hits += int(np.argmax(scores) == target)
    p = 1.0 / c
    sigma = np.sqrt(p * (1 - p) / n_events)
    assert abs(hits / n_events - p) < 3 * sigma


# --- factorization predictors ----------------------------------------------------------


def test_mf_is_seqmf_with_recency_disabled():
    rng = np.random.default_rng(5)
    hp = Hyperparams(dim=3)
    Q = rng.normal(size=(6, 3))
    embeddings = {0: rng.normal(size=3)}
    seq = FactorizationPredictor(Q, embeddings, hp, use_recency=True)
    mf = FactorizationPredictor(Q, embeddings, hp, use_recency=False, name="mf")
    cands = [0, 2, 4]
    # with an empty session the two coincide bit for bit
    np.testing.assert_array_equal(seq.score(0, [], cands), mf.score(0, [], cands))
    # mf ignores the session prefix entirely
    np.testing.assert_array_equal(mf.score(0, [1, 3], cands), mf.score(0, [], cands))
    # seqmf with recency caps at hp.recency_len
    long_prefix = [1] * 50
    np.testing.assert_array_equal(
        seq.score(0, long_prefix, cands), seq.score(0, [1] * hp.recency_len, cands)
    )


def test_unknown_user_scores_without_embedding():
    rng = np.random.default_rng(6)
    hp = Hyperparams(dim=3)
    Q = rng.normal(size=(4, 3))
    predictor = FactorizationPredictor(Q, {}, hp, use_recency=True)
    np.testing.assert_array_equal(predictor.score(42, [], [0, 1]), [0.0, 0.0])
    assert np.all(np.isfinite(predictor.score(42, [2], [0, 1])))


def test_make_baseline():
    assert make_baseline("sr").pooled
    assert not make_baseline("sr_od").pooled
    assert make_baseline("random", seed=2).name == "random"
    with pytest.raises(ValueError):
        make_baseline("transformer")
