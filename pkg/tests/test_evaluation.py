from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedapm.dataset import build_shards, load_movielens
from fedapm.evaluation import GlobalScorer, candidate_items, evaluate_recommender, hit_at_k, rank_hit
from fedapm.recommender import init_params, item_feature_table, score
from fedapm.rng import substream

from conftest import requires_ml100k


def brute_force_hit(scores, target, candidates, k):
    """Sort candidates by descending score with the target placed last among ties."""
    order = sorted(candidates, key=lambda i: (-scores[i], i == target))
    return int(order.index(target) < k)


def test_unique_max_and_min():
    scores = np.array([0.1, 0.9, 0.3, 0.2])
    cands = np.arange(4)
    assert all(rank_hit(scores, 1, cands, k) == 1 for k in (1, 2, 4))
    assert rank_hit(scores, 0, cands, 3) == 0


def test_toy_universe_against_oracle():
    scores = np.array([0.5, 0.7, 0.2, 0.9, 0.6])
    cands = np.arange(5)
    for target in range(5):
        assert rank_hit(scores, target, cands, 2) == brute_force_hit(scores, target, cands, 2)


def test_ties_are_pessimistic():
    scores = np.array([1.0, 1.0, 0.0])
    assert rank_hit(scores, 0, np.arange(3), 1) == 0
    assert rank_hit(scores, 0, np.arange(3), 2) == 1


@settings(max_examples=100)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=30), st.data())
def test_rank_hit_matches_brute_force(raw, data):
    scores = np.array(raw, dtype=float)
    target = data.draw(st.integers(0, len(raw) - 1))
    k = data.draw(st.integers(1, len(raw)))
    cands = np.arange(len(raw))
    assert rank_hit(scores, target, cands, k) == brute_force_hit(scores, target, cands, k)


@settings(max_examples=50)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=20), st.data())
def test_hit_monotone_in_k(raw, data):
    scores = np.array(raw)
    target = data.draw(st.integers(0, len(raw) - 1))
    cands = np.arange(len(raw))
    hits = [rank_hit(scores, target, cands, k) for k in range(1, len(raw) + 1)]
    assert hits == sorted(hits)


def test_candidates_exclude_training_positives(toy_world):
    shards, X, _ = toy_world
    s = shards[0]
    c = candidate_items(s, X.shape[0])
    assert s.held_out_item in c
    assert not (set(c.tolist()) & (s.positives - {s.held_out_item}))
    assert len(c) == X.shape[0] - len(s.positives) + 1


def test_logits_rank_like_scores(toy_world):
    shards, X, theta = toy_world
    scorer = GlobalScorer(theta, X)
    s = shards[2]
    from fedapm.recommender import neighbor_mean, user_representation

    z = user_representation(theta, s.features, neighbor_mean(s, X))
    probs = score(z, X @ theta["E_V"].T, theta.mlp1, theta.mlp2)
    logits = scorer.logits(s)
    np.testing.assert_allclose(1 / (1 + np.exp(-logits)), probs, rtol=1e-12)


def test_all_hits_and_two_shard_toy(toy_world):
    shards, X, theta = toy_world
    assert evaluate_recommender(theta, shards, X, k=X.shape[0]) == 1.0
    pair = shards[:2]
    hits = [hit_at_k(theta, s, X, 5) for s in pair]
    assert evaluate_recommender(theta, pair, X, 5) == np.mean(hits)


def test_shard_order_invariance(toy_world):
    shards, X, theta = toy_world
    assert evaluate_recommender(theta, shards, X, 5) == evaluate_recommender(theta, shards[::-1], X, 5)


def test_missing_held_out_rejected(toy_world):
    shards, X, theta = toy_world
    with pytest.raises(ValueError):
        hit_at_k(theta, replace(shards[0], held_out_item=None), X, 5)


@requires_ml100k
def test_random_model_near_uniform_hit(data_dir):
    inter, profiles, st_ = load_movielens(data_dir / "ml-100k/u.data", data_dir / "ml-100k/u.user")
    shards = build_shards(inter, profiles, st_.n_items, 4, 0)
    hits = []
    for seed in range(3):
        X = item_feature_table(st_.n_items, 16, substream(seed, "items"))
        theta = init_params(16, 16, substream(seed, "init"))
        hits.append(evaluate_recommender(theta, shards, X, 20))
    # random parameters still share item structure across users, so allow a wide band
    assert np.mean(hits) == pytest.approx(20 / 1682, abs=0.01)
