"""Small differentiable building blocks with hand-written gradients.

Parameters live in a :class:`FlatParams` container: named arrays that are
views into one contiguous float64 buffer, so optimisers, aggregation and
noise injection work on a single vector while model code reads named blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

PROB_CLAMP = 1e-7


class FlatParams:
    """Ordered named arrays backed by a single flat float64 buffer."""

    def __init__(self, shapes: Sequence[tuple[str, tuple[int, ...]]], flat: np.ndarray | None = None) -> None:
        self.shapes: tuple[tuple[str, tuple[int, ...]], ...] = tuple((n, tuple(s)) for n, s in shapes)
        sizes = [int(np.prod(s)) for _, s in self.shapes]
        self.offsets: dict[str, tuple[int, int]] = {}
        pos = 0
        for (name, _), size in zip(self.shapes, sizes):
            self.offsets[name] = (pos, pos + size)
            pos += size
        if flat is None:
            flat = np.zeros(pos)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (pos,):
            raise ValueError(f"flat buffer has shape {flat.shape}, expected ({pos},)")
        self.flat = flat
        self._views = {name: flat[a:b].reshape(shape) for (name, shape), (a, b) in zip(self.shapes, self.offsets.values())}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __setitem__(self, name: str, value) -> None:
        self._views[name][...] = value

    def __len__(self) -> int:
        return self.flat.size

    def names(self) -> list[str]:
        return [n for n, _ in self.shapes]

    def items(self):
        return self._views.items()

    def copy(self):
        return type(self)(self.shapes, self.flat.copy())

    def zeros_like(self):
        return type(self)(self.shapes)

    def with_flat(self, flat: np.ndarray):
        return type(self)(self.shapes, flat)

    def congruent(self, other: "FlatParams") -> bool:
        return self.shapes == other.shapes


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self) -> None:
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"inconsistent layer shapes {self.weights.shape} / {self.bias.shape}")


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """``W @ x + b``; ``x`` may be a vector or a batch with samples in rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != layer.weights.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} != layer input dim {layer.weights.shape[1]}")
    return x @ layer.weights.T + layer.bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x):
    """Overflow-free logistic function."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def bce_loss(r_hat, r) -> float:
    """Binary cross-entropy summed over the batch."""
    p = np.clip(np.asarray(r_hat, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    r = np.asarray(r, dtype=float)
    return float(-(r * np.log(p) + (1.0 - r) * np.log1p(-p)).sum())


def bce_with_logits(logits: np.ndarray, r: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed BCE of ``sigmoid(logits)`` and its gradient w.r.t. the logits.

    Evaluated as ``softplus(o) - r * o``, which needs no probability clamp and
    keeps the gradient ``sigmoid(o) - r`` alive for saturated logits.  Equal
    to :func:`bce_loss` wherever the clamp is inactive.
    """
    o = np.asarray(logits, dtype=float)
    r = np.asarray(r, dtype=float)
    loss = float((np.logaddexp(0.0, o) - r * o).sum())
    return loss, sigmoid(o) - r


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Multiclass cross-entropy summed over rows; ``labels`` are class indices."""
    p = np.clip(probs[np.arange(len(labels)), labels], PROB_CLAMP, 1.0)
    return float(-np.log(p).sum())


def sgd_step(params: FlatParams, grads: FlatParams, lr: float) -> None:
    if not params.congruent(grads):
        raise ValueError("parameter and gradient shapes differ")
    params.flat -= lr * grads.flat


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_block: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    @property
    def worst_block(self) -> str:
        return max(self.per_block, key=self.per_block.get)


def finite_diff_check(
    loss_fn: Callable[[FlatParams], float],
    params: FlatParams,
    grads: FlatParams | Mapping[str, np.ndarray],
    h: float = 1e-4,
    tol: float = 1e-4,
    abs_floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    The error of one entry is ``|g - g_fd| / max(|g|, |g_fd|, abs_floor)``.
    With ``max_entries`` set, each block is checked on a random subset of at
    most that many entries.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    probe = params.copy()
    per_block: dict[str, float] = {}
    for name in params.names():
        a, b = params.offsets[name]
        idx = np.arange(a, b)
        if max_entries is not None and idx.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(idx, max_entries, replace=False))
        analytic = np.asarray(grads[name], dtype=float).ravel()
        worst = 0.0
        for i in idx:
            orig = probe.flat[i]
            probe.flat[i] = orig + h
            up = loss_fn(probe)
            probe.flat[i] = orig - h
            down = loss_fn(probe)
            probe.flat[i] = orig
            fd = (up - down) / (2 * h)
            g = analytic[i - a]
            worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), abs_floor))
        per_block[name] = worst
    return GradCheckReport(max(per_block.values(), default=0.0), per_block, tol)
