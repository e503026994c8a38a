"""Local GCN recommender: user convolution, item embedding and MLP scorer.

Forward pass for user ``u`` and a batch of items::

    z_u   = E_U x_u
    z_N   = mean_{v in N(u)} W1 E_V x_v
    z_u*  = ReLU(W2 (z_u + z_N) + b)
    z_v   = E_V x_v
    r_uv  = sigmoid(mlp2(ReLU(mlp1([z_u*, z_v]))))
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import FEATURE_DIM, UserShard
from .nn import DenseLayer, FlatParams, bce_with_logits, dense_forward, relu, sgd_step, sigmoid

logger = logging.getLogger(__name__)

PARAM_ORDER = ("E_U", "W1", "W2", "b", "E_V", "mlp1.W", "mlp1.b", "mlp2.W", "mlp2.b")
COMPONENTS: dict[str, tuple[str, ...]] = {
    "User": ("E_U", "W1", "W2", "b"),
    "Item": ("E_V",),
    "MLP1": ("mlp1.W", "mlp1.b"),
    "MLP2": ("mlp2.W", "mlp2.b"),
}
TAG_OF = {name: tag for tag, names in COMPONENTS.items() for name in names}

_MAGIC = b"FAPM\x01"


class TrainingDiverged(RuntimeError):
    pass


def param_shapes(d: int, d2: int, d1: int = FEATURE_DIM) -> list[tuple[str, tuple[int, ...]]]:
    return [
        ("E_U", (d, d1)),
        ("W1", (d, d)),
        ("W2", (d, d)),
        ("b", (d,)),
        ("E_V", (d, d2)),
        ("mlp1.W", (d, 2 * d)),
        ("mlp1.b", (d,)),
        ("mlp2.W", (1, d)),
        ("mlp2.b", (1,)),
    ]


class ParamSet(FlatParams):
    """Trainable parameters of one local recommender, in serialization order."""

    @classmethod
    def empty(cls, d: int, d2: int) -> "ParamSet":
        return cls(param_shapes(d, d2))

    @property
    def d(self) -> int:
        return self["W1"].shape[0]

    @property
    def d2(self) -> int:
        return self["E_V"].shape[1]

    @property
    def mlp1(self) -> DenseLayer:
        return DenseLayer(self["mlp1.W"], self["mlp1.b"])

    @property
    def mlp2(self) -> DenseLayer:
        return DenseLayer(self["mlp2.W"], self["mlp2.b"])

    def component_slices(self) -> dict[str, list[tuple[int, int]]]:
        return {tag: [self.offsets[n] for n in names] for tag, names in COMPONENTS.items()}

    def component_index(self, tags: Iterable[str]) -> np.ndarray:
        """Flat indices of the given component tags, in serialization order.

        ``"Full"`` selects every parameter.
        """
        tags = set(tags)
        if "Full" in tags:
            return np.arange(len(self))
        unknown = tags - COMPONENTS.keys()
        if unknown:
            raise KeyError(f"unknown component tags {sorted(unknown)}")
        parts = [np.arange(*self.offsets[n]) for n in self.names() if TAG_OF[n] in tags]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def tag_vector(self) -> np.ndarray:
        """Per-entry component tag as an index into ``("User","Item","MLP1","MLP2")``."""
        order = list(COMPONENTS)
        out = np.empty(len(self), dtype=np.int8)
        for name, (a, b) in self.offsets.items():
            out[a:b] = order.index(TAG_OF[name])
        return out

    # serialization: magic, u32 header length, JSON header, little-endian float64 payload
    def to_bytes(self, meta: dict | None = None) -> bytes:
        header = {"order": [n for n, _ in self.shapes], "shapes": [list(s) for _, s in self.shapes], **(meta or {})}
        hb = json.dumps(header, sort_keys=True).encode()
        return _MAGIC + struct.pack("<I", len(hb)) + hb + self.flat.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["ParamSet", dict]:
        if not blob.startswith(_MAGIC):
            raise ValueError("not a ParamSet blob")
        (n,) = struct.unpack_from("<I", blob, len(_MAGIC))
        start = len(_MAGIC) + 4
        header = json.loads(blob[start : start + n])
        shapes = [(name, tuple(s)) for name, s in zip(header["order"], header["shapes"])]
        flat = np.frombuffer(blob[start + n :], dtype="<f8").astype(np.float64)
        return cls(shapes, flat), header

    def save(self, path: Path | str, meta: dict | None = None) -> None:
        Path(path).write_bytes(self.to_bytes(meta))

    @classmethod
    def load(cls, path: Path | str) -> tuple["ParamSet", dict]:
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class Hyper:
    d: int = 64
    lr: float = 0.001
    batch: int = 32
    local_epochs: int = 5
    q: int = 4

    def __post_init__(self) -> None:
        for name in ("d", "batch", "q"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.local_epochs < 0:
            raise ValueError("lr and local_epochs must be non-negative")


def init_params(d: int, d2: int, rng: np.random.Generator, std: float = 1.0) -> ParamSet:
    """Every entry i.i.d. ``N(0, std^2)``."""
    if d < 1 or d2 < 1:
        raise ValueError("dimensions must be positive")
    p = ParamSet.empty(d, d2)
    p.flat[:] = rng.standard_normal(len(p))
    if std != 1.0:
        p.flat *= std
    return p


def item_feature_table(n_items: int, d2: int, rng: np.random.Generator) -> np.ndarray:
    """Frozen random raw item features, one row per item."""
    return rng.standard_normal((n_items, d2))


def embed_user(E_U: np.ndarray, x_u: np.ndarray) -> np.ndarray:
    return dense_forward(DenseLayer(E_U, np.zeros(E_U.shape[0])), x_u)


def embed_item(E_V: np.ndarray, x_v: np.ndarray) -> np.ndarray:
    """Item embedding(s); ``x_v`` may be one vector or a matrix of row vectors."""
    return dense_forward(DenseLayer(E_V, np.zeros(E_V.shape[0])), x_v)


def aggregate_neighbors(z_neighbors: np.ndarray | Sequence[np.ndarray], W1: np.ndarray) -> np.ndarray:
    z = np.asarray(z_neighbors, dtype=float)
    if z.size == 0:
        return np.zeros(W1.shape[0])
    return (z @ W1.T).mean(axis=0)


def user_convolution(z_u: np.ndarray, z_n: np.ndarray, W2: np.ndarray, b: np.ndarray) -> np.ndarray:
    return relu(dense_forward(DenseLayer(W2, b), z_u + z_n))


def score(z_star: np.ndarray, z_v: np.ndarray, mlp1: DenseLayer, mlp2: DenseLayer) -> np.ndarray:
    """Ranking score(s) in (0, 1); ``z_v`` may hold several items in rows."""
    return sigmoid(score_logits(z_star, z_v, mlp1, mlp2))


def score_logits(z_star: np.ndarray, z_v: np.ndarray, mlp1: DenseLayer, mlp2: DenseLayer) -> np.ndarray:
    z_v = np.asarray(z_v, dtype=float)
    if z_v.ndim == 1:
        cat = np.concatenate([z_star, z_v])
    else:
        cat = np.hstack([np.broadcast_to(z_star, z_v.shape), z_v])
    return dense_forward(mlp2, relu(dense_forward(mlp1, cat)))[..., 0]


def neighbor_mean(shard: UserShard, item_features: np.ndarray) -> np.ndarray:
    """Mean raw feature of the user's training neighbours (zeros if none)."""
    if shard.neighbors.size == 0:
        return np.zeros(item_features.shape[1])
    return item_features[shard.neighbors].mean(axis=0)


def user_representation(params: ParamSet, x_u: np.ndarray, xbar: np.ndarray) -> np.ndarray:
    """Convolved user embedding.

    Averaging ``W1 E_V x_v`` over neighbours equals ``W1 E_V`` applied to the
    neighbours' mean raw feature, which is what is computed here.
    """
    z_u = params["E_U"] @ x_u
    z_n = params["W1"] @ (params["E_V"] @ xbar)
    return relu(params["W2"] @ (z_u + z_n) + params["b"])


def loss_and_grad(
    params: ParamSet,
    x_u: np.ndarray,
    xbar: np.ndarray,
    x_items: np.ndarray,
    labels: np.ndarray,
    grads: ParamSet | None = None,
) -> tuple[float, ParamSet]:
    """Summed BCE over a minibatch and its exact gradient.

    ``x_items`` holds the raw features of the batch items in rows.  When
    ``grads`` is given it is overwritten in place.
    """
    if grads is None:
        grads = params.zeros_like()
    d = params.d
    E_U, W1, W2, b, E_V = params["E_U"], params["W1"], params["W2"], params["b"], params["E_V"]
    M1W, M1b, M2W, M2b = params["mlp1.W"], params["mlp1.b"], params["mlp2.W"], params["mlp2.b"]

    ev_xbar = E_V @ xbar
    s = E_U @ x_u + W1 @ ev_xbar
    h = W2 @ s + b
    z_star = np.maximum(h, 0.0)
    Zv = x_items @ E_V.T  # (B, d)
    a1 = Zv @ M1W[:, d:].T + (M1W[:, :d] @ z_star + M1b)
    h1 = np.maximum(a1, 0.0)
    logits = h1 @ M2W[0] + M2b[0]
    loss, do = bce_with_logits(logits, labels)

    mul = np.multiply.outer
    np.matmul(do, h1, out=grads["mlp2.W"][0])
    grads["mlp2.b"][0] = do.sum()
    da1 = mul(do, M2W[0])
    da1 *= a1 > 0
    sum_da1 = da1.sum(axis=0)
    gM1W = grads["mlp1.W"]
    mul(sum_da1, z_star, out=gM1W[:, :d])
    np.matmul(da1.T, Zv, out=gM1W[:, d:])
    grads["mlp1.b"][...] = sum_da1
    dh = M1W[:, :d].T @ sum_da1
    dh *= h > 0
    mul(dh, s, out=grads["W2"])
    grads["b"][...] = dh
    ds = W2.T @ dh
    mul(ds, x_u, out=grads["E_U"])
    mul(ds, ev_xbar, out=grads["W1"])
    gEV = grads["E_V"]
    np.matmul((da1 @ M1W[:, d:]).T, x_items, out=gEV)
    gEV += mul(W1.T @ ds, xbar)
    return loss, grads


def batch_loss(params: ParamSet, x_u: np.ndarray, xbar: np.ndarray, x_items: np.ndarray, labels: np.ndarray) -> float:
    """Loss only, composed from the public forward operations."""
    z_star = user_representation(params, x_u, xbar)
    z_v = embed_item(params["E_V"], x_items)
    o = score_logits(z_star, z_v, params.mlp1, params.mlp2)
    return bce_with_logits(o, labels)[0]


def local_train(
    shard: UserShard,
    theta_global: ParamSet,
    hyper: Hyper,
    rng: np.random.Generator,
    item_features: np.ndarray,
) -> tuple[ParamSet, list[float]]:
    """Minibatch SGD on one client's shard, starting from a copy of the global model.

    Returns the local parameters and the summed training loss of each epoch.
    """
    n = shard.examples_items.size
    if n == 0:
        raise ValueError(f"user {shard.user_id} has no training examples")
    theta = theta_global.copy()
    grads = theta.zeros_like()
    x_u = shard.features
    xbar = neighbor_mean(shard, item_features)
    epoch_losses = []
    for _ in range(hyper.local_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch):
            idx = order[start : start + hyper.batch]
            items = shard.examples_items[idx]
            loss, _ = loss_and_grad(theta, x_u, xbar, item_features[items], shard.examples_labels[idx], grads)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss for user {shard.user_id} (lr={hyper.lr})")
            sgd_step(theta, grads, hyper.lr)
            total += loss
        epoch_losses.append(total)
    return theta, epoch_losses
