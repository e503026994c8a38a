"""End-to-end pipeline: data, federated training, Hit@K, attacks, reports."""

from __future__ import annotations

import csv
import json
import logging
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plots
from .attack import (
    AttackError,
    DeltaArchive,
    aia_attack,
    build_attack_dataset,
    f1_score,
    knn_attack,
    random_attack,
)
from .config import ATTRIBUTES, ExperimentConfig
from .dataset import UserShard, build_shards, load_movielens, synthetic_movielens
from .evaluation import evaluate_recommender
from .federation import TrainLog, run_training
from .recommender import ParamSet, init_params, item_feature_table
from .rng import substream

logger = logging.getLogger(__name__)

ATTACK_COLUMNS = ("attribute", "attacker", "component_mask", "zeta", "seed", "f1")


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException) -> None:
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


@dataclass
class PreparedData:
    shards: list[UserShard]
    n_items: int
    item_features: np.ndarray
    occupations: tuple[str, ...] = ()
    stats: dict = field(default_factory=dict)


@dataclass
class ExperimentReport:
    config: dict
    config_hash: str
    seed: int
    k: int
    hit_at_k: float | None
    lambdas: dict[str, float]
    attack_rows: list[dict]
    rounds_run: int
    data_stats: dict

    def summary(self) -> list[dict]:
        """Mean and spread of F1 over attacker seeds per (attribute, attacker, mask, zeta)."""
        groups: dict[tuple, list[float]] = {}
        for r in self.attack_rows:
            groups.setdefault((r["attribute"], r["attacker"], r["component_mask"], r["zeta"]), []).append(r["f1"])
        return [
            {"attribute": a, "attacker": t, "component_mask": m, "zeta": z, "f1_mean": float(np.mean(v)),
             "f1_std": float(np.std(v)), "n_seeds": len(v)}
            for (a, t, m, z), v in sorted(groups.items())
        ]

    def f1(self, attribute: str, attacker: str = "aia", mask: str = "Full", zeta: float | None = None) -> float:
        vals = [
            r["f1"] for r in self.attack_rows
            if r["attribute"] == attribute and r["attacker"] == attacker and r["component_mask"] == mask
            and (zeta is None or r["zeta"] == zeta)
        ]
        if not vals:
            raise KeyError((attribute, attacker, mask, zeta))
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "k": self.k,
            "hit_at_k": self.hit_at_k,
            "lambdas": self.lambdas,
            "rounds_run": self.rounds_run,
            "data_stats": self.data_stats,
            "attack_summary": self.summary(),
            "attack_rows": self.attack_rows,
        }


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    if cfg.data.synthetic_users > 0:
        inter, profiles = synthetic_movielens(cfg.data.synthetic_users, cfg.data.synthetic_items, cfg.seed)
        n_items, occupations = cfg.data.synthetic_items, ()
        stats = {"n_users": len(profiles), "n_items": n_items, "n_interactions": len(inter), "synthetic": True}
    else:
        ratings, profiles_path = cfg.data_paths()
        inter, profiles, st = load_movielens(ratings, profiles_path, cfg.data.format)
        n_items, occupations = st.n_items, st.occupations
        stats = {"n_users": st.n_users, "n_items": st.n_items, "n_interactions": st.n_interactions,
                 "rejected_ratings": st.rejected_ratings, "duplicates": st.duplicates}
    shards = build_shards(inter, profiles, n_items, cfg.model.q, cfg.seed)
    X = item_feature_table(n_items, cfg.d2, substream(cfg.seed, "items"))
    return PreparedData(shards, n_items, X, occupations, stats)


def initial_model(cfg: ExperimentConfig) -> ParamSet:
    return init_params(cfg.model.d, cfg.d2, substream(cfg.seed, "init"), cfg.model.init_std)


def train_stage(cfg: ExperimentConfig, data: PreparedData, workers: int = 1) -> tuple[ParamSet, TrainLog, DeltaArchive]:
    evaluate = None
    if cfg.federation.eval_every:
        evaluate = lambda th: evaluate_recommender(th, data.shards, data.item_features, cfg.federation.eval_k)  # noqa: E731
    return run_training(
        data.shards, data.item_features, initial_model(cfg), cfg.hyper(), cfg.federation_config(),
        cfg.budget_plan(), cfg.seed, workers=workers, evaluate=evaluate,
    )


def attack_stage(cfg: ExperimentConfig, archive: DeltaArchive, labels: dict[int, dict[str, int]]) -> list[dict]:
    """Run every configured (attribute, zeta, mask, attacker, seed) cell.

    ``labels`` maps user id to ``{"gender": .., "age": ..}``.  The split
    hands the attacker only the ζ-fraction's labels for training; the
    remaining labels are used by this harness to score predictions.
    """
    a = cfg.attack
    rows = []
    aia = cfg.aia_hyper()
    for mask_name in a.masks:
        mask = tuple(mask_name.split("+"))
        users, deltas = archive.matrix(mask, combine=a.combine)
        if users.size == 0:
            logger.warning("delta archive is empty; no attacks run")
            return rows
        for attr in a.attributes:
            n_classes = ATTRIBUTES[attr]
            y = {int(u): labels[int(u)][attr] for u in users}
            for zeta in a.zeta:
                for s in a.seeds:
                    ds = None
                    for attempt in range(20):
                        try:
                            ds = build_attack_dataset(
                                users, deltas, y, n_classes, zeta, substream(cfg.seed, "attack-split", attr, s, attempt)
                            )
                            break
                        except AttackError:
                            continue
                    if ds is None:
                        raise AttackError(f"could not draw a split containing every {attr} class")
                    for name in a.attackers:
                        rng = substream(cfg.seed, "attacker", name, attr, mask_name, s)
                        if name == "aia":
                            pred = aia_attack(ds, aia, rng)
                        elif name == "knn":
                            pred = knn_attack(ds, a.knn_k)
                        else:
                            pred = random_attack(ds, rng)
                        rows.append({"attribute": attr, "attacker": name, "component_mask": mask_name,
                                     "zeta": zeta, "seed": s, "f1": f1_score(pred, ds.y_test, n_classes)})
                        logger.info("attack %s/%s/%s zeta=%s seed=%d: F1 %.3f", attr, name, mask_name, zeta, s, rows[-1]["f1"])
    return rows


def shard_labels(shards: Sequence[UserShard]) -> dict[int, dict[str, int]]:
    return {s.user_id: {"gender": s.labels.gender, "age": s.labels.age_group} for s in shards}


def lambda_table(cfg: ExperimentConfig) -> dict[str, float]:
    plan = cfg.budget_plan()
    return plan.tag_scales() if plan is not None else {}


def _content_config(cfg: ExperimentConfig) -> dict:
    """Config without the output location, so reports compare across directories."""
    d = cfg.to_dict()
    d.pop("output_dir")
    return d


def run_pipeline(cfg: ExperimentConfig, workers: int = 1, data: PreparedData | None = None):
    """Train, evaluate and attack in memory; returns (report, theta, log, archive)."""
    stage = "data"
    try:
        data = data or prepare_data(cfg)
        stage = "train"
        theta, log, archive = train_stage(cfg, data, workers)
        stage = "evaluate"
        hit = evaluate_recommender(theta, data.shards, data.item_features, cfg.federation.eval_k)
        stage = "attack"
        rows = attack_stage(cfg, archive, shard_labels(data.shards))
    except Exception as exc:
        raise StageError(stage, exc) from exc
    report = ExperimentReport(
        config=_content_config(cfg), config_hash=cfg.config_hash(), seed=cfg.seed, k=cfg.federation.eval_k,
        hit_at_k=hit, lambdas=lambda_table(cfg), attack_rows=rows, rounds_run=len(log), data_stats=data.stats,
    )
    return report, theta, log, archive


# ---------------------------------------------------------------- file output
def stamp(cfg: ExperimentConfig) -> str:
    return f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n"


def write_attack_csv(rows: Sequence[dict], path: Path, cfg: ExperimentConfig) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(stamp(cfg))
        w = csv.DictWriter(fh, fieldnames=ATTACK_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "f1": repr(float(r["f1"]))})


def read_attack_csv(path: Path) -> list[dict]:
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        rows.append({**r, "zeta": float(r["zeta"]), "seed": int(r["seed"]), "f1": float(r["f1"])})
    return rows


def write_trainlog(log: TrainLog, path: Path, cfg: ExperimentConfig) -> None:
    log.to_csv(path, timings=False)  # wall-clock lives in timings.json
    body = Path(path).read_text()
    Path(path).write_text(stamp(cfg) + body)


def write_json(obj, path: Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_component_curve(summary: Sequence[dict], path: Path, cfg: ExperimentConfig) -> None:
    """Long-format CSV for F1-versus-component plots."""
    with open(path, "w", newline="") as fh:
        fh.write(stamp(cfg))
        w = csv.writer(fh)
        w.writerow(["attribute", "attacker", "component_mask", "zeta", "f1_mean", "f1_std", "n_seeds"])
        for s in summary:
            w.writerow([s["attribute"], s["attacker"], s["component_mask"], s["zeta"],
                        repr(s["f1_mean"]), repr(s["f1_std"]), s["n_seeds"]])


class OutputDir:
    """Writes into a scratch directory that replaces ``target`` only on success."""

    def __init__(self, target: Path | str) -> None:
        self.target = Path(target)

    def __enter__(self) -> Path:
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return
        if self.target.exists():
            shutil.rmtree(self.target)
        self.tmp.rename(self.target)


def checkpoint_meta(cfg: ExperimentConfig, rounds_run: int) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "round": rounds_run}


def write_training_outputs(out: Path, cfg: ExperimentConfig, data: PreparedData, theta, log, archive) -> None:
    theta.save(out / "checkpoint.bin", checkpoint_meta(cfg, len(log)))
    archive.save(out / "deltas.bin", {"config_hash": cfg.config_hash(), "seed": cfg.seed})
    write_trainlog(log, out / "trainlog.csv", cfg)
    write_json({"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "seed": cfg.seed}, out / "config.json")
    if data.occupations:
        write_json({"config_hash": cfg.config_hash(), "seed": cfg.seed,
                    "occupations": {n: i for i, n in enumerate(data.occupations)}}, out / "occupations.json")
    plots.training_curve(log.rows, out / "figures" / "training_loss.png", stamp(cfg).strip())


def run_experiment(cfg: ExperimentConfig, workers: int = 1, output_dir: Path | str | None = None) -> ExperimentReport:
    """Full pipeline with every artifact written to the output directory."""
    t0 = time.perf_counter()
    data = prepare_data(cfg)
    report, theta, log, archive = run_pipeline(cfg, workers, data)
    with OutputDir(output_dir or cfg.output_dir) as out:
        write_training_outputs(out, cfg, data, theta, log, archive)
        write_json(report.to_dict(), out / "report.json")
        write_attack_csv(report.attack_rows, out / "attack.csv", cfg)
        write_component_curve(report.summary(), out / "f1_by_component.csv", cfg)
        write_json({"hit_at_k": report.hit_at_k, "k": report.k, "config_hash": report.config_hash, "seed": cfg.seed},
                   out / "eval.json")
        if report.attack_rows:
            plots.component_f1(report.attack_rows, out / "figures" / "f1_by_component.png", stamp(cfg).strip())
        (out / "timings.json").write_text(json.dumps({"seconds": round(time.perf_counter() - t0, 3),
                                                      "train": [r.seconds for r in log.rows]}))
    return report
