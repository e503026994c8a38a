"""Leave-one-out Hit@K over the full candidate set."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .dataset import UserShard
from .recommender import ParamSet, neighbor_mean, user_representation


class GlobalScorer:
    """Scores every item for a user with the global model.

    Ranking uses the MLP output before the sigmoid: the sigmoid is strictly
    increasing, so the order is the same, but saturated probabilities would
    otherwise collapse distinct scores into ties.
    """

    def __init__(self, theta: ParamSet, item_features: np.ndarray) -> None:
        d = theta.d
        self.theta = theta
        self.item_features = item_features
        z_items = item_features @ theta["E_V"].T
        self._item_part = z_items @ theta["mlp1.W"][:, d:].T + theta["mlp1.b"]
        self._user_w = theta["mlp1.W"][:, :d]
        self._out_w = theta["mlp2.W"][0]
        self._out_b = theta["mlp2.b"][0]

    @property
    def n_items(self) -> int:
        return self._item_part.shape[0]

    def logits(self, shard: UserShard) -> np.ndarray:
        z_star = user_representation(self.theta, shard.features, neighbor_mean(shard, self.item_features))
        h = np.maximum(self._item_part + self._user_w @ z_star, 0.0)
        return h @ self._out_w + self._out_b


def rank_hit(scores: np.ndarray, target: int, candidates: np.ndarray, k: int) -> int:
    """1 iff fewer than ``k`` other candidates score at least as high as ``target``."""
    others = candidates[candidates != target]
    ahead = int(np.count_nonzero(scores[others] >= scores[target]))
    return int(ahead < k)


def candidate_items(shard: UserShard, n_items: int) -> np.ndarray:
    """Held-out item plus every item the user never interacted with."""
    mask = np.ones(n_items, dtype=bool)
    mask[list(shard.positives)] = False
    if shard.held_out_item is not None:
        mask[shard.held_out_item] = True
    return np.flatnonzero(mask)


def hit_at_k(theta: ParamSet, shard: UserShard, item_features: np.ndarray, k: int, scorer: GlobalScorer | None = None) -> int:
    if shard.held_out_item is None:
        raise ValueError(f"user {shard.user_id} has no held-out item")
    scorer = scorer or GlobalScorer(theta, item_features)
    scores = scorer.logits(shard)
    return rank_hit(scores, shard.held_out_item, candidate_items(shard, scorer.n_items), k)


def evaluate_recommender(theta: ParamSet, shards: Sequence[UserShard], item_features: np.ndarray, k: int = 20) -> float:
    """Mean Hit@K over users that have a held-out item."""
    scorer = GlobalScorer(theta, item_features)
    hits = [hit_at_k(theta, s, item_features, k, scorer) for s in shards if s.held_out_item is not None]
    if not hits:
        raise ValueError("no evaluable users")
    return float(np.mean(hits))
