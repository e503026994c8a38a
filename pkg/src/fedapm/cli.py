"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

from . import plots
from .attack import DeltaArchive
from .config import ConfigError, ExperimentConfig
from .evaluation import evaluate_recommender
from .experiment import (
    OutputDir,
    StageError,
    attack_stage,
    prepare_data,
    run_experiment,
    shard_labels,
    stamp,
    train_stage,
    write_attack_csv,
    write_component_curve,
    write_json,
    write_training_outputs,
    ExperimentReport,
    lambda_table,
)
from .recommender import ParamSet

logger = logging.getLogger("fedapm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for item in args.set or []:
        key, _, value = item.partition("=")
        cfg = cfg.override(key, _parse_value(value))
    if getattr(args, "output", None):
        cfg = cfg.override("output_dir", args.output)
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _checkpoint_dir(cfg: ExperimentConfig, args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.output_dir)


def cmd_train(cfg: ExperimentConfig, args) -> int:
    data = prepare_data(cfg)
    try:
        theta, log, archive = train_stage(cfg, data, args.workers)
    except Exception as exc:
        raise StageError("train", exc) from exc
    with OutputDir(cfg.output_dir) as out:
        write_training_outputs(out, cfg, data, theta, log, archive)
    print(f"trained {len(log)} rounds -> {cfg.output_dir}")
    return EXIT_OK


def _load_checkpoint(cfg: ExperimentConfig, args) -> tuple[ParamSet, Path]:
    ckdir = _checkpoint_dir(cfg, args)
    path = ckdir / "checkpoint.bin" if ckdir.is_dir() else ckdir
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    theta, _ = ParamSet.load(path)
    return theta, path.parent


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    theta, ckdir = _load_checkpoint(cfg, args)
    data = prepare_data(cfg)
    hit = evaluate_recommender(theta, data.shards, data.item_features, cfg.federation.eval_k)
    write_json({"hit_at_k": hit, "k": cfg.federation.eval_k, "config_hash": cfg.config_hash(), "seed": cfg.seed},
               ckdir / "eval.json")
    print(f"Hit@{cfg.federation.eval_k} = {hit:.4f}")
    return EXIT_OK


def cmd_attack(cfg: ExperimentConfig, args) -> int:
    ckdir = _checkpoint_dir(cfg, args)
    archive_path = ckdir / "deltas.bin" if ckdir.is_dir() else ckdir
    if not archive_path.exists():
        raise FileNotFoundError(f"delta archive {archive_path} not found")
    archive, _ = DeltaArchive.load(archive_path)
    data = prepare_data(cfg)
    rows = attack_stage(cfg, archive, shard_labels(data.shards))
    report = ExperimentReport(cfg.to_dict(), cfg.config_hash(), cfg.seed, cfg.federation.eval_k, None, lambda_table(cfg), rows, 0, data.stats)
    out = archive_path.parent
    write_attack_csv(rows, out / "attack.csv", cfg)
    write_component_curve(report.summary(), out / "f1_by_component.csv", cfg)
    if rows:
        plots.component_f1(rows, out / "figures" / "f1_by_component.png", stamp(cfg).strip())
    for s in report.summary():
        print(f"{s['attribute']:6s} {s['attacker']:6s} {s['component_mask']:5s} zeta={s['zeta']}: F1 {s['f1_mean']:.3f} ± {s['f1_std']:.3f}")
    return EXIT_OK


def parse_grid(items: list[str]) -> list[tuple[str, list]]:
    """``section.key=v1,v2`` entries (JSON values) to (key, values) pairs."""
    grid = []
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise ConfigError(f"bad grid entry {item!r}; expected key=v1,v2")
        grid.append((key, [_parse_value(v) for v in values.split(",")]))
    return grid


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    grid = parse_grid(args.grid)
    if not grid:
        raise ConfigError("sweep needs at least one --grid entry")
    keys = [k for k, _ in grid]
    cells = list(itertools.product(*[v for _, v in grid]))
    # validate every cell before running any
    cell_cfgs = []
    for values in cells:
        c = cfg
        for k, v in zip(keys, values):
            c = c.override(k, v)
        name = "_".join(f"{k.split('.')[-1]}={v}" for k, v in zip(keys, values))
        cell_cfgs.append((name, values, c.override("output_dir", str(Path(cfg.output_dir) / name))))
    points = []
    for name, values, c in cell_cfgs:
        report = run_experiment(c, workers=args.workers)
        point = {"cell": name, "value": values[0], "hit": report.hit_at_k, "config_hash": report.config_hash}
        for attr in c.attack.attributes:
            if any(r["attacker"] == "aia" and r["component_mask"] == "Full" for r in report.attack_rows):
                point[f"f1_{attr}"] = report.f1(attr)
        points.append(point)
        print(f"{name}: Hit@{c.federation.eval_k}={report.hit_at_k:.4f}")
    out = Path(cfg.output_dir)
    write_json({"grid": [[k, v] for k, v in grid], "points": points}, out / "sweep.json")
    if len(grid) == 1 and all(isinstance(p["value"], (int, float)) for p in points):
        plots.sweep_curves(points, keys[0], out / "figures" / "sweep.png", stamp(cfg).strip())
    return EXIT_OK


def cmd_run(cfg: ExperimentConfig, args) -> int:
    report = run_experiment(cfg, workers=args.workers)
    print(f"Hit@{report.k} = {report.hit_at_k:.4f}")
    for s in report.summary():
        if s["component_mask"] == "Full":
            print(f"{s['attribute']:6s} {s['attacker']:6s} zeta={s['zeta']}: F1 {s['f1_mean']:.3f}")
    return EXIT_OK


def cmd_selftest(cfg: ExperimentConfig | None, args) -> int:
    from .selftest import run_selftest

    results = run_selftest(verbose=True)
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedapm", description="Federated recommendation privacy workbench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="TOML experiment config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (JSON value)")
        sp.add_argument("--output", help="output directory (overrides output_dir)")
        sp.add_argument("--workers", type=int, default=1, help="client-level parallelism")
        if checkpoint:
            sp.add_argument("--checkpoint", help="run directory or checkpoint/archive file")

    common(sub.add_parser("train", help="federated training; writes checkpoint, delta archive, log"))
    common(sub.add_parser("eval", help="Hit@K of a checkpoint"), checkpoint=True)
    common(sub.add_parser("attack", help="attribute inference against a delta archive"), checkpoint=True)
    sp = sub.add_parser("sweep", help="run the full pipeline over a parameter grid")
    common(sp)
    sp.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2")
    common(sub.add_parser("run", help="train, evaluate and attack in one go"))
    sub.add_parser("selftest", help="gradient, noise-moment and budget-table checks")
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "attack": cmd_attack, "sweep": cmd_sweep, "run": cmd_run}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "selftest":
        return cmd_selftest(None, args)
    try:
        cfg = _load_config(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.workers < 1:
        print("config error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
