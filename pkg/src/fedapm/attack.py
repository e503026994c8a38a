"""Attribute inference from parameter deltas.

The attacker sees what an honest-but-curious server sees: the broadcast
model, each sampled client's upload and the true attributes of a small
compromised fraction of users.  From each (broadcast, upload) pair it forms
the pseudo-gradient ``(broadcast - upload) / lr`` and trains a classifier
mapping pseudo-gradients to private attributes.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .nn import FlatParams, softmax
from .recommender import ParamSet

logger = logging.getLogger(__name__)

MASK_TAGS = ("User", "Item", "MLP1", "MLP2", "Full")
_ARCHIVE_MAGIC = b"FAPMDA\x01"
_REC_HEAD = struct.Struct("<qqBq")


class AttackError(RuntimeError):
    pass


def mask_bits(mask: Iterable[str]) -> int:
    bits = 0
    for tag in mask:
        bits |= 1 << MASK_TAGS.index(tag)
    return bits


def bits_mask(bits: int) -> tuple[str, ...]:
    return tuple(t for i, t in enumerate(MASK_TAGS) if bits >> i & 1)


def mask_index(theta: ParamSet | FlatParams, mask: Iterable[str]) -> np.ndarray:
    return ParamSet(theta.shapes).component_index(mask)


@dataclass
class DeltaRecord:
    user_id: int
    round: int
    component_mask: tuple[str, ...]
    delta: np.ndarray


def compute_delta(
    theta_broadcast: ParamSet,
    theta_upload: ParamSet,
    lr: float,
    mask: Iterable[str] = ("Full",),
    user_id: int = -1,
    round: int = -1,
) -> DeltaRecord:
    """Pseudo-gradient of one upload, restricted to ``mask``, in serialization order."""
    if lr <= 0:
        raise ValueError("learning rate must be positive to form a pseudo-gradient")
    if not theta_broadcast.congruent(theta_upload):
        raise ValueError("broadcast and upload shapes differ")
    mask = tuple(mask)
    idx = mask_index(theta_broadcast, mask)
    delta = (theta_broadcast.flat[idx] - theta_upload.flat[idx]) / lr
    return DeltaRecord(user_id, round, mask, delta)


@dataclass
class DeltaArchive:
    """Harvested pseudo-gradients with the parameter layout they refer to."""

    shapes: tuple
    lr: float
    records: list[DeltaRecord] = field(default_factory=list)

    def add(self, rec: DeltaRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def users(self) -> list[int]:
        return sorted({r.user_id for r in self.records})

    def rounds(self) -> list[int]:
        return sorted({r.round for r in self.records})

    def matrix(
        self, mask: Iterable[str] = ("Full",), combine: str = "latest", rounds: Iterable[int] | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """One row per user (ascending id) restricted to ``mask``.

        Records must hold full deltas.  ``combine`` picks the latest record of
        each user or averages all of them.
        """
        mask = tuple(mask)
        idx = mask_index(ParamSet(self.shapes), mask)
        wanted = None if rounds is None else set(rounds)
        by_user: dict[int, list[DeltaRecord]] = {}
        for r in self.records:
            if r.component_mask != ("Full",):
                raise AttackError("archive rows must hold full deltas to be re-masked")
            if wanted is None or r.round in wanted:
                by_user.setdefault(r.user_id, []).append(r)
        users = sorted(by_user)
        if not users:
            return np.zeros(0, dtype=np.int64), np.zeros((0, idx.size))
        rows = []
        for u in users:
            recs = sorted(by_user[u], key=lambda r: r.round)
            if combine == "latest":
                rows.append(recs[-1].delta[idx])
            elif combine == "mean":
                rows.append(np.mean([r.delta[idx] for r in recs], axis=0))
            else:
                raise ValueError(f"unknown combine rule {combine!r}")
        return np.asarray(users, dtype=np.int64), np.vstack(rows)

    def to_bytes(self, meta: dict | None = None) -> bytes:
        header = {"shapes": [[n, list(s)] for n, s in self.shapes], "lr": self.lr, "n_records": len(self.records)}
        header.update(meta or {})
        hb = json.dumps(header, sort_keys=True).encode()
        parts = [_ARCHIVE_MAGIC, struct.pack("<I", len(hb)), hb]
        for r in self.records:
            parts.append(_REC_HEAD.pack(r.user_id, r.round, mask_bits(r.component_mask), r.delta.size))
            parts.append(np.ascontiguousarray(r.delta, dtype="<f8").tobytes())
        return b"".join(parts)

    def save(self, path: Path | str, meta: dict | None = None) -> None:
        Path(path).write_bytes(self.to_bytes(meta))

    @classmethod
    def load(cls, path: Path | str) -> tuple["DeltaArchive", dict]:
        blob = Path(path).read_bytes()
        if not blob.startswith(_ARCHIVE_MAGIC):
            raise ValueError(f"{path} is not a delta archive")
        pos = len(_ARCHIVE_MAGIC)
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        header = json.loads(blob[pos : pos + n])
        pos += n
        arch = cls(tuple((name, tuple(s)) for name, s in header["shapes"]), header["lr"])
        for _ in range(header["n_records"]):
            uid, rnd, bits, size = _REC_HEAD.unpack_from(blob, pos)
            pos += _REC_HEAD.size
            delta = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).astype(np.float64)
            pos += 8 * size
            arch.add(DeltaRecord(uid, rnd, bits_mask(bits), delta))
        return arch, header


@dataclass
class AttackDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    train_users: np.ndarray
    test_users: np.ndarray
    n_classes: int


def split_users(users: Sequence[int], zeta: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < zeta < 1:
        raise ValueError("zeta must be in (0, 1)")
    users = np.asarray(sorted(users))
    n_train = max(1, int(round(zeta * users.size)))
    perm = rng.permutation(users.size)
    return np.sort(users[perm[:n_train]]), np.sort(users[perm[n_train:]])


def build_attack_dataset(
    users: np.ndarray,
    deltas: np.ndarray,
    labels: Mapping[int, int],
    n_classes: int,
    zeta: float,
    rng: np.random.Generator,
    standardize: bool = True,
) -> AttackDataset:
    """Per-user ζ split of delta rows, standardized with train-split statistics.

    ``labels`` is consulted only for the users it returns; callers hand the
    attacker the labels of the compromised users for training and keep the
    rest for scoring.
    """
    train_u, test_u = split_users(users, zeta, rng)
    pos = {int(u): i for i, u in enumerate(users)}
    tr = np.array([pos[u] for u in train_u], dtype=np.int64)
    te = np.array([pos[u] for u in test_u], dtype=np.int64)
    y_train = np.array([labels[int(u)] for u in train_u], dtype=np.int64)
    y_test = np.array([labels[int(u)] for u in test_u], dtype=np.int64)
    missing = set(range(n_classes)) - set(y_train.tolist())
    if missing:
        raise AttackError(f"classes {sorted(missing)} absent from the attacker's training split; resample")
    x_train, x_test = deltas[tr], deltas[te]
    if standardize:
        mu = x_train.mean(axis=0)
        sd = x_train.std(axis=0)
        sd[sd == 0] = 1.0
        x_train = (x_train - mu) / sd
        x_test = (x_test - mu) / sd
    return AttackDataset(x_train, y_train, x_test, y_test, train_u, test_u, n_classes)


def aia_shapes(n_in: int, n_classes: int, hidden: tuple[int, int] = (100, 30)):
    h1, h2 = hidden
    return [("W1", (h1, n_in)), ("b1", (h1,)), ("W2", (h2, h1)), ("b2", (h2,)), ("W3", (n_classes, h2)), ("b3", (n_classes,))]


class AiaModel(FlatParams):
    """Three dense layers (ReLU, ReLU, softmax head)."""

    @property
    def n_classes(self) -> int:
        return self["W3"].shape[0]

    @property
    def n_in(self) -> int:
        return self["W1"].shape[1]


def init_aia(n_in: int, n_classes: int, rng: np.random.Generator, hidden=(100, 30)) -> AiaModel:
    m = AiaModel(aia_shapes(n_in, n_classes, hidden))
    for w in ("W1", "W2", "W3"):
        fan_in = m[w].shape[1]
        m[w] = rng.normal(0.0, np.sqrt(2.0 / fan_in), m[w].shape)
    return m


def aia_logits(model: AiaModel, x: np.ndarray) -> np.ndarray:
    h1 = np.maximum(x @ model["W1"].T + model["b1"], 0.0)
    h2 = np.maximum(h1 @ model["W2"].T + model["b2"], 0.0)
    return h2 @ model["W3"].T + model["b3"]


def infer(model: AiaModel, delta: np.ndarray) -> np.ndarray:
    """Class probabilities for one delta row or a matrix of rows."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape[-1] != model.n_in:
        raise ValueError(f"delta length {delta.shape[-1]} != model input {model.n_in}")
    return softmax(aia_logits(model, delta))


def aia_loss_and_grad(model: AiaModel, x: np.ndarray, y: np.ndarray, grads: AiaModel | None = None):
    """Mean multiclass cross-entropy over the batch and its gradient."""
    if grads is None:
        grads = model.zeros_like()
    n = x.shape[0]
    a1 = x @ model["W1"].T + model["b1"]
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ model["W2"].T + model["b2"]
    h2 = np.maximum(a2, 0.0)
    logits = h2 @ model["W3"].T + model["b3"]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), y].sum() / n)
    dlog = np.exp(logp)
    dlog[np.arange(n), y] -= 1.0
    dlog /= n
    np.matmul(dlog.T, h2, out=grads["W3"])
    grads["b3"] = dlog.sum(axis=0)
    da2 = (dlog @ model["W3"]) * (a2 > 0)
    np.matmul(da2.T, h1, out=grads["W2"])
    grads["b2"] = da2.sum(axis=0)
    da1 = (da2 @ model["W2"]) * (a1 > 0)
    np.matmul(da1.T, x, out=grads["W1"])
    grads["b1"] = da1.sum(axis=0)
    return loss, grads


@dataclass(frozen=True)
class AiaHyper:
    epochs: int = 500
    lr: float = 0.01
    batch: int = 16
    hidden: tuple[int, int] = (100, 30)


def train_aia(dataset: AttackDataset, hyper: AiaHyper, rng: np.random.Generator) -> AiaModel:
    x, y = dataset.x_train, dataset.y_train
    if x.shape[0] == 0:
        raise AttackError("empty attacker training split")
    model = init_aia(x.shape[1], dataset.n_classes, rng, hyper.hidden)
    grads = model.zeros_like()
    n = x.shape[0]
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch):
            idx = order[start : start + hyper.batch]
            loss, _ = aia_loss_and_grad(model, x[idx], y[idx], grads)
            if not np.isfinite(loss):
                raise AttackError(f"attacker training diverged at epoch {epoch}; lower lr (now {hyper.lr})")
            model.flat -= hyper.lr * grads.flat
    return model


def aia_attack(dataset: AttackDataset, hyper: AiaHyper, rng: np.random.Generator) -> np.ndarray:
    model = train_aia(dataset, hyper, rng)
    return infer(model, dataset.x_test).argmax(axis=1)


def knn_predict(x_train: np.ndarray, y_train: np.ndarray, x_query: np.ndarray, k: int = 5) -> np.ndarray:
    """Majority vote of the ``k`` nearest training rows (Euclidean).

    Vote ties go to the tied class whose voters have the smallest mean distance.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError("k must be a positive odd integer")
    k = min(k, x_train.shape[0])
    d2 = (x_query**2).sum(1)[:, None] - 2 * x_query @ x_train.T + (x_train**2).sum(1)[None, :]
    dist = np.sqrt(np.maximum(d2, 0.0))
    out = np.empty(x_query.shape[0], dtype=np.int64)
    for i, row in enumerate(dist):
        nn = np.argsort(row, kind="stable")[:k]
        classes, counts = np.unique(y_train[nn], return_counts=True)
        tied = classes[counts == counts.max()]
        if tied.size == 1:
            out[i] = tied[0]
        else:
            means = [row[nn][y_train[nn] == c].mean() for c in tied]
            out[i] = tied[int(np.argmin(means))]
    return out


def knn_attack(dataset: AttackDataset, k: int = 5) -> np.ndarray:
    return knn_predict(dataset.x_train, dataset.y_train, dataset.x_test, k)


def random_attack(dataset: AttackDataset, rng: np.random.Generator) -> np.ndarray:
    """Guess labels from the training split's empirical class distribution."""
    freq = np.bincount(dataset.y_train, minlength=dataset.n_classes) / dataset.y_train.size
    return rng.choice(dataset.n_classes, size=dataset.y_test.size, p=freq)


def f1_score(predictions: Sequence[int], labels: Sequence[int], n_classes: int) -> float:
    """Macro-averaged F1; a class with zero denominator contributes 0."""
    p = np.asarray(predictions)
    t = np.asarray(labels)
    if p.shape != t.shape:
        raise ValueError("predictions and labels differ in length")
    scores = []
    for c in range(n_classes):
        tp = np.sum((p == c) & (t == c))
        fp = np.sum((p == c) & (t != c))
        fn = np.sum((p != c) & (t == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))
