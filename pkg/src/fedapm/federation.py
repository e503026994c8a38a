"""In-process FedAvg simulation.

The server side (:class:`Server`, :func:`sample_clients`, :func:`aggregate`)
only ever handles user ids and parameter sets.  Client work (local training
followed by optional perturbation) runs through :func:`client_update`, which
is the single place that touches a :class:`~fedapm.dataset.UserShard`.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .attack import DeltaArchive, compute_delta
from .dataset import UserShard
from .privacy import BudgetPlan, perturb
from .recommender import Hyper, ParamSet, local_train
from .rng import substream

logger = logging.getLogger(__name__)


class AggregationError(RuntimeError):
    pass


@dataclass
class RoundLog:
    round: int
    mean_loss: float
    seconds: float
    bytes: int


@dataclass
class TrainLog:
    rows: list[RoundLog] = field(default_factory=list)

    def append(self, row: RoundLog) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path: Path | str, timings: bool = True) -> None:
        """Write ``round,mean_loss,seconds,bytes``.

        With ``timings=False`` the seconds column is zeroed so the file is
        reproducible byte for byte.
        """
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "mean_loss", "seconds", "bytes"])
            for r in self.rows:
                w.writerow([r.round, repr(r.mean_loss), f"{r.seconds if timings else 0.0:.3f}", r.bytes])


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 100
    fraction: float = 0.5
    harvest_rounds: tuple[int, ...] | None = None  # None: final round only
    eval_every: int = 0
    patience: int = 10

    def __post_init__(self) -> None:
        if not 0 < self.fraction <= 1:
            raise ValueError("client fraction must be in (0, 1]")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")

    def harvest_set(self, last_round: int) -> set[int]:
        if self.harvest_rounds is None:
            return {last_round}
        return {r if r >= 0 else last_round + 1 + r for r in self.harvest_rounds}


def sample_clients(all_users: Sequence[int], fraction: float, rng: np.random.Generator) -> list[int]:
    """``ceil(fraction * M)`` distinct users, returned sorted."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    users = np.asarray(sorted(all_users))
    k = math.ceil(fraction * len(users) - 1e-9)
    return sorted(int(u) for u in rng.choice(users, size=k, replace=False))


def aggregate(uploads: Mapping[int, ParamSet]) -> ParamSet:
    """Element-wise mean, summed in ascending user-id order.

    Computed as the first upload plus the mean offset from it, so identical
    uploads reproduce that upload bit for bit.
    """
    if not uploads:
        raise AggregationError("no uploads to aggregate")
    ids = sorted(uploads)
    first = uploads[ids[0]]
    acc = np.zeros_like(first.flat)
    for uid in ids:
        up = uploads[uid]
        if not up.congruent(first):
            raise AggregationError(f"upload of user {uid} has incongruent shapes")
        acc += up.flat - first.flat
    return first.with_flat(first.flat + acc / len(ids))


def client_update(
    shard: UserShard,
    theta: ParamSet,
    hyper: Hyper,
    plan: BudgetPlan | None,
    seed: int,
    rnd: int,
    item_features: np.ndarray,
) -> tuple[ParamSet, float]:
    """Local training plus (optional) perturbation; returns the upload and mean loss."""
    train_rng = substream(seed, "client", rnd, shard.user_id)
    noise_rng = substream(seed, "noise", rnd, shard.user_id)
    n = shard.examples_items.size
    if plan is not None and plan.per_epoch:
        local = theta
        losses = []
        for _ in range(hyper.local_epochs):
            one = Hyper(d=hyper.d, lr=hyper.lr, batch=hyper.batch, local_epochs=1, q=hyper.q)
            local, ep = local_train(shard, local, one, train_rng, item_features)
            local = perturb(local, plan, noise_rng)
            losses += ep
    else:
        local, losses = local_train(shard, theta, hyper, train_rng, item_features)
        if plan is not None:
            local = perturb(local, plan, noise_rng)
    mean_loss = float(losses[-1]) / n if losses else 0.0
    return local, mean_loss


# worker-process state, installed once per process by the pool initializer
_WORKER: dict = {}


def _init_worker(shards, hyper, plan, seed, item_features) -> None:
    _WORKER.update(shards={s.user_id: s for s in shards}, hyper=hyper, plan=plan, seed=seed, X=item_features)


def _worker_task(args):
    uid, shapes, flat, rnd = args
    theta = ParamSet(shapes, flat)
    up, loss = client_update(_WORKER["shards"][uid], theta, _WORKER["hyper"], _WORKER["plan"], _WORKER["seed"], rnd, _WORKER["X"])
    return uid, up.flat, loss


class ClientPool:
    """Runs client updates inline or on a process pool; results are keyed by user id."""

    def __init__(self, shards, hyper, plan, seed, item_features, workers: int = 1) -> None:
        self.workers = max(1, int(workers))
        self._local = None
        self._pool = None
        if self.workers == 1:
            _init_worker(shards, hyper, plan, seed, item_features)
            self._local = dict(_WORKER)
        else:
            self._pool = ProcessPoolExecutor(
                self.workers, initializer=_init_worker, initargs=(shards, hyper, plan, seed, item_features)
            )

    def run(self, user_ids: Iterable[int], theta: ParamSet, rnd: int) -> tuple[dict[int, ParamSet], dict[int, float]]:
        uploads: dict[int, ParamSet] = {}
        losses: dict[int, float] = {}
        if self._pool is None:
            w = self._local
            for uid in user_ids:
                up, loss = client_update(w["shards"][uid], theta, w["hyper"], w["plan"], w["seed"], rnd, w["X"])
                uploads[uid], losses[uid] = up, loss
        else:
            jobs = [(uid, theta.shapes, theta.flat, rnd) for uid in user_ids]
            for uid, flat, loss in self._pool.map(_worker_task, jobs, chunksize=8):
                uploads[uid], losses[uid] = theta.with_flat(flat), loss
        return uploads, losses

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Server:
    """Honest-but-curious aggregator: sees broadcasts, uploads and user ids only."""

    def __init__(self, theta0: ParamSet, user_ids: Sequence[int], cfg: FederationConfig, seed: int, lr: float) -> None:
        self.theta = theta0.copy()
        self.user_ids = sorted(user_ids)
        self.cfg = cfg
        self.seed = seed
        self.lr = lr
        self.archive = DeltaArchive(shapes=theta0.shapes, lr=lr)
        self.log = TrainLog()

    def select(self, rnd: int) -> list[int]:
        return sample_clients(self.user_ids, self.cfg.fraction, substream(self.seed, "sampling", rnd))

    def receive(self, rnd: int, uploads: Mapping[int, ParamSet], harvest: bool) -> ParamSet:
        if harvest and self.lr == 0:
            logger.warning("round %d: learning rate is 0, pseudo-gradients undefined; nothing archived", rnd)
        elif harvest:
            for uid in sorted(uploads):
                self.archive.add(compute_delta(self.theta, uploads[uid], self.lr, ("Full",), user_id=uid, round=rnd))
        new = aggregate(uploads)
        if not np.all(np.isfinite(new.flat)):
            raise AggregationError(f"non-finite global model after round {rnd}")
        self.theta = new
        return new


def run_training(
    shards: Sequence[UserShard],
    item_features: np.ndarray,
    theta0: ParamSet,
    hyper: Hyper,
    cfg: FederationConfig,
    plan: BudgetPlan | None,
    seed: int,
    workers: int = 1,
    evaluate: Callable[[ParamSet], float] | None = None,
) -> tuple[ParamSet, TrainLog, DeltaArchive]:
    """Run FedAvg for ``cfg.rounds`` rounds; return the global model, log and delta archive."""
    server = Server(theta0, [s.user_id for s in shards], cfg, seed, hyper.lr)
    if cfg.rounds == 0:
        return server.theta, server.log, server.archive
    last = cfg.rounds - 1
    harvest = cfg.harvest_set(last)
    best, stale = -np.inf, 0
    with ClientPool(shards, hyper, plan, seed, item_features, workers) as pool:
        for rnd in range(cfg.rounds):
            t0 = time.perf_counter()
            sampled = server.select(rnd)
            uploads, losses = pool.run(sampled, server.theta, rnd)
            server.receive(rnd, uploads, rnd in harvest)
            mean_loss = float(np.mean([losses[u] for u in sorted(losses)]))
            nbytes = 8 * len(server.theta) * len(uploads)
            server.log.append(RoundLog(rnd, mean_loss, time.perf_counter() - t0, nbytes))
            logger.info("round %d: %d clients, mean loss %.4f", rnd, len(sampled), mean_loss)
            if evaluate is not None and cfg.eval_every and (rnd + 1) % cfg.eval_every == 0:
                score = evaluate(server.theta)
                logger.info("round %d: validation %.4f", rnd, score)
                if score > best:
                    best, stale = score, 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        logger.info("early stop after round %d", rnd)
                        break
    return server.theta, server.log, server.archive
