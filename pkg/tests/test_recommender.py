from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedapm.dataset import FEATURE_DIM, PrivateLabels, UserShard
from fedapm.nn import DenseLayer, dense_forward, relu, sgd_step, sigmoid
from fedapm.recommender import (
    COMPONENTS,
    Hyper,
    ParamSet,
    aggregate_neighbors,
    batch_loss,
    embed_item,
    embed_user,
    init_params,
    item_feature_table,
    local_train,
    loss_and_grad,
    neighbor_mean,
    score,
    user_convolution,
    user_representation,
)
from fedapm.rng import substream
from fedapm.selftest import check_gradients


def make_shard(n_pos, n_neg, n_items, rng, user_id=0):
    items = rng.choice(n_items, n_pos + n_neg, replace=False)
    pos, neg = np.sort(items[:n_pos]), items[n_pos:]
    return UserShard(
        user_id=user_id,
        positives=frozenset(int(i) for i in pos),
        neighbors=pos,
        examples_items=np.concatenate([pos, neg]),
        examples_labels=np.concatenate([np.ones(n_pos), np.zeros(n_neg)]),
        features=rng.random(FEATURE_DIM),
        labels=PrivateLabels(0, 1),
        held_out_item=None,
    )


# ---------------------------------------------------------------- parameters
def test_init_deterministic():
    a = init_params(8, 8, np.random.default_rng(3))
    b = init_params(8, 8, np.random.default_rng(3))
    assert a.flat.tobytes() == b.flat.tobytes()


def test_init_moments():
    p = init_params(64, 64, substream(0, "init"))
    x = np.concatenate([p.flat] + [init_params(64, 64, substream(s, "init")).flat for s in range(1, 5)])[:100_000]
    assert abs(x.mean()) < 0.02 and abs(x.std() - 1) < 0.02


def test_param_count_d64():
    expected = 64 * 44 + 64 * 64 + 64 * 64 + 64 + 64 * 64 + (64 * 128 + 64) + (64 + 1)
    assert expected == 23489
    assert len(ParamSet.empty(64, 64)) == expected


def test_component_partition_covers_everything():
    p = ParamSet.empty(8, 8)
    idx = np.concatenate([p.component_index([t]) for t in COMPONENTS])
    assert np.array_equal(np.sort(idx), np.arange(len(p)))
    assert p.component_index(["MLP2"]).size == 9
    assert np.array_equal(p.component_index(["Full"]), np.arange(len(p)))


def test_serialization_roundtrip(tmp_path, rng):
    p = init_params(4, 6, rng)
    p.save(tmp_path / "c.bin", {"round": 3})
    q, meta = ParamSet.load(tmp_path / "c.bin")
    assert q.shapes == p.shapes and q.flat.tobytes() == p.flat.tobytes()
    assert meta["round"] == 3
    with pytest.raises(ValueError):
        ParamSet.from_bytes(b"junk")


# ---------------------------------------------------------------- forward pieces
def test_embed_user_cases(rng):
    assert not embed_user(np.zeros((4, FEATURE_DIM)), rng.random(FEATURE_DIM)).any()
    E = np.zeros((3, 5))
    E[:, 2] = [1.0, 2.0, 3.0]
    np.testing.assert_array_equal(embed_user(E, np.eye(5)[2]), [1, 2, 3])
    E, x = rng.normal(size=(3, 5)), rng.normal(size=5)
    loop = [sum(E[i, j] * x[j] for j in range(5)) for i in range(3)]
    np.testing.assert_allclose(embed_user(E, x), loop, atol=1e-12)
    np.testing.assert_allclose(embed_item(E, x), loop, atol=1e-12)


def test_aggregate_neighbors(rng):
    W1 = rng.normal(size=(3, 3))
    z = rng.normal(size=3)
    np.testing.assert_array_equal(aggregate_neighbors([z], W1), W1 @ z)
    np.testing.assert_allclose(aggregate_neighbors([[2.0, 0.0], [0.0, 2.0]], np.eye(2)), [1, 1])
    zs = rng.normal(size=(6, 3))
    np.testing.assert_allclose(aggregate_neighbors(zs, W1), aggregate_neighbors(zs[::-1], W1), atol=1e-14)


def test_user_convolution(rng):
    assert not user_convolution(np.zeros(3), np.zeros(3), rng.normal(size=(3, 3)), np.zeros(3)).any()
    np.testing.assert_array_equal(user_convolution(np.array([-1.0, 0.0]), np.array([0.0, 2.0]), np.eye(2), np.zeros(2)), [0, 2])
    W2, b, zu, zn = rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
    composed = relu(dense_forward(DenseLayer(W2, b), zu + zn))
    assert user_convolution(zu, zn, W2, b).tobytes() == composed.tobytes()


def test_score_cases(rng):
    d = 4
    zero = ParamSet.empty(d, d)
    assert score(np.zeros(d), np.zeros(d), zero.mlp1, zero.mlp2) == 0.5
    p = init_params(d, d, rng)
    zs, zv = rng.normal(size=d), rng.normal(size=d)
    cat = np.concatenate([zs, zv])
    hidden = np.maximum(p["mlp1.W"] @ cat + p["mlp1.b"], 0)
    hand = 1 / (1 + np.exp(-(p["mlp2.W"][0] @ hidden + p["mlp2.b"][0])))
    assert score(zs, zv, p.mlp1, p.mlp2) == pytest.approx(hand, abs=1e-12)
    lo = score(zs, zv, p.mlp1, p.mlp2)
    p["mlp2.b"] += 0.5
    assert score(zs, zv, p.mlp1, p.mlp2) > lo


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_score_strictly_inside_unit_interval(seed):
    rng = np.random.default_rng(seed)
    p = init_params(4, 4, rng)
    s = score(rng.normal(size=4), rng.normal(size=(5, 4)), p.mlp1, p.mlp2)
    assert np.all((s > 0) & (s < 1))


def test_neighbor_mean_form_matches_explicit_average(rng):
    p = init_params(4, 5, rng)
    X = rng.normal(size=(10, 5))
    nbrs = [1, 4, 7]
    z_n = aggregate_neighbors(embed_item(p["E_V"], X[nbrs]), p["W1"])
    x_u = rng.random(FEATURE_DIM)
    explicit = user_convolution(embed_user(p["E_U"], x_u), z_n, p["W2"], p["b"])
    np.testing.assert_allclose(user_representation(p, x_u, X[nbrs].mean(axis=0)), explicit, atol=1e-12)
    perm = user_representation(p, x_u, X[nbrs[::-1]].mean(axis=0))
    np.testing.assert_allclose(perm, explicit, atol=1e-12)


# ---------------------------------------------------------------- gradients
def test_full_model_gradient_check():
    ok, detail = check_gradients(n_instances=20, d=8, tol=1e-4)
    assert ok, detail


def test_duplicate_example_doubles_gradient(rng):
    p = init_params(5, 5, rng, std=0.5)
    x_u, xbar, x = rng.random(FEATURE_DIM), rng.normal(size=5), rng.normal(size=(1, 5))
    l1, g1 = loss_and_grad(p, x_u, xbar, x, np.array([1.0]))
    l2, g2 = loss_and_grad(p, x_u, xbar, np.vstack([x, x]), np.array([1.0, 1.0]))
    assert l2 == pytest.approx(2 * l1)
    np.testing.assert_allclose(g2.flat, 2 * g1.flat, rtol=1e-12, atol=1e-15)


def test_zero_model_output_bias_gradient(rng):
    p = ParamSet.empty(3, 3)
    for r in (0.0, 1.0):
        _, g = loss_and_grad(p, rng.random(FEATURE_DIM), rng.normal(size=3), rng.normal(size=(1, 3)), np.array([r]))
        assert g["mlp2.b"][0] == pytest.approx(0.5 - r)
        assert not g.flat[:-1].any()


def test_loss_matches_composed_forward(rng):
    p = init_params(6, 6, rng, std=0.5)
    args = rng.random(FEATURE_DIM), rng.normal(size=6), rng.normal(size=(7, 6)), rng.integers(0, 2, 7).astype(float)
    assert loss_and_grad(p, *args)[0] == pytest.approx(batch_loss(p, *args), rel=1e-12)


# ---------------------------------------------------------------- local training
def test_zero_lr_keeps_global(rng):
    X = item_feature_table(30, 4, rng)
    shard = make_shard(5, 10, 30, rng)
    theta = init_params(4, 4, rng, std=0.1)
    out, _ = local_train(shard, theta, Hyper(d=4, lr=0.0), substream(0, "c"), X)
    assert out.flat.tobytes() == theta.flat.tobytes()


def test_single_step_equals_hand_sgd(rng):
    X = item_feature_table(10, 4, rng)
    shard = make_shard(1, 0, 10, rng)
    theta = init_params(4, 4, rng, std=0.3)
    before = theta.flat.copy()
    out, _ = local_train(shard, theta, Hyper(d=4, lr=0.05, local_epochs=1), substream(0, "c"), X)
    expect = theta.copy()
    _, g = loss_and_grad(expect, shard.features, neighbor_mean(shard, X), X[shard.examples_items], shard.examples_labels)
    sgd_step(expect, g, 0.05)
    np.testing.assert_array_equal(out.flat, expect.flat)
    np.testing.assert_array_equal(theta.flat, before)  # global untouched


def test_local_loss_mostly_decreases():
    rng = np.random.default_rng(11)
    X = item_feature_table(200, 8, rng)
    shard = make_shard(10, 40, 200, rng)
    theta = init_params(8, 8, rng, std=0.1)
    _, losses = local_train(shard, theta, Hyper(d=8, lr=0.01), substream(0, "c"), X)
    drops = sum(b <= a for a, b in zip(losses, losses[1:]))
    assert len(losses) == 5 and drops >= 4


def test_local_train_same_rng_same_result(rng):
    X = item_feature_table(50, 4, rng)
    shard = make_shard(6, 12, 50, rng)
    theta = init_params(4, 4, rng, std=0.1)
    a, _ = local_train(shard, theta, Hyper(d=4, lr=0.01), substream(5, "c"), X)
    b, _ = local_train(shard, theta, Hyper(d=4, lr=0.01), substream(5, "c"), X)
    assert a.flat.tobytes() == b.flat.tobytes()


def test_empty_shard_rejected(rng):
    shard = replace(make_shard(1, 0, 5, rng), examples_items=np.zeros(0, dtype=np.int64), examples_labels=np.zeros(0))
    with pytest.raises(ValueError):
        local_train(shard, init_params(2, 2, rng), Hyper(d=2), rng, np.zeros((5, 2)))
