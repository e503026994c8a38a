"""Experiment configuration: TOML schema, defaults, validation and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attack import MASK_TAGS, AiaHyper
from .federation import FederationConfig
from .privacy import RESISTANCE_PRESETS, BudgetPlan, PrivacyConfigError
from .recommender import Hyper

DATA_DIR_ENV = "FEDAPM_DATA_DIR"
PRIVACY_MODES = ("none", "off", "adaptive", "fixed", "gaussian")
ATTACKERS = ("aia", "knn", "random")
ATTRIBUTES = {"gender": 2, "age": 3}


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    ratings: str = "ml-100k/u.data"
    profiles: str = "ml-100k/u.user"
    format: str = "tab-separated-100k"
    data_dir: str = ""
    synthetic_users: int = 0
    synthetic_items: int = 200


@dataclass
class ModelSection:
    d: int = 64
    d2: int = 0  # 0: same as d
    lr: float = 0.01
    batch: int = 32
    local_epochs: int = 5
    q: int = 4
    init_std: float = 0.1


@dataclass
class FederationSection:
    rounds: int = 100
    fraction: float = 0.5
    harvest_rounds: list[int] = field(default_factory=list)
    eval_every: int = 0
    patience: int = 10
    eval_k: int = 20


@dataclass
class PrivacySection:
    mode: str = "none"
    eps_min: float = 30.0
    eps_max: float = 60.0
    delta: float = 0.5
    resistance: Any = "default"
    lam: float | None = None
    sigma: float | None = None
    per_epoch: bool = False


@dataclass
class AttackSection:
    attributes: list[str] = field(default_factory=lambda: ["gender", "age"])
    zeta: list[float] = field(default_factory=lambda: [0.1])
    masks: list[str] = field(default_factory=lambda: ["Full", "User", "Item", "MLP1", "MLP2"])
    attackers: list[str] = field(default_factory=lambda: ["aia", "knn", "random"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    knn_k: int = 5
    aia_epochs: int = 500
    aia_lr: float = 0.01
    aia_batch: int = 16
    combine: str = "latest"


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    federation: FederationSection = field(default_factory=FederationSection)
    privacy: PrivacySection = field(default_factory=PrivacySection)
    attack: AttackSection = field(default_factory=AttackSection)

    # ----- construction
    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = copy.deepcopy(raw)
        sections = {f.name: f.type for f in fields(cls) if f.name not in ("seed", "output_dir")}
        cfg = cls()
        for key, value in raw.items():
            if key in ("seed", "output_dir"):
                setattr(cfg, key, value)
            elif key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"[{key}] must be a table")
                target = getattr(cfg, key)
                known = {f.name for f in fields(target)}
                for k, v in value.items():
                    if k not in known:
                        raise ConfigError(f"unknown key {key}.{k}")
                    setattr(target, k, v)
            else:
                raise ConfigError(f"unknown key {key!r}")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Path | str) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def override(self, dotted: str, value: Any) -> "ExperimentConfig":
        """Copy with one ``section.key`` (or top-level key) replaced."""
        raw = self.to_dict()
        parts = dotted.split(".")
        node = raw
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown key {dotted}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown key {dotted}")
        node[parts[-1]] = value
        return type(self).from_dict(raw)

    # ----- validation
    def validate(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        m, f, p, a = self.model, self.federation, self.privacy, self.attack
        try:
            self.hyper()
            self.federation_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if m.d2 < 0 or m.init_std <= 0:
            raise ConfigError("model.d2 must be >= 0 and model.init_std > 0")
        if f.eval_k < 1:
            raise ConfigError("federation.eval_k must be >= 1")
        if self.data.format not in ("tab-separated-100k", "double-colon-1m"):
            raise ConfigError(f"unknown data.format {self.data.format!r}")
        if p.mode not in PRIVACY_MODES:
            raise ConfigError(f"privacy.mode must be one of {PRIVACY_MODES}")
        try:
            self.budget_plan()
        except PrivacyConfigError as exc:
            raise ConfigError(str(exc)) from None
        for attr in a.attributes:
            if attr not in ATTRIBUTES:
                raise ConfigError(f"unknown attribute {attr!r}")
        for z in a.zeta:
            if not 0 < z < 1:
                raise ConfigError("attack.zeta entries must be in (0, 1)")
        for mask in a.masks:
            for tag in mask.split("+"):
                if tag not in MASK_TAGS:
                    raise ConfigError(f"unknown component mask {mask!r}")
        for name in a.attackers:
            if name not in ATTACKERS:
                raise ConfigError(f"unknown attacker {name!r}")
        if a.knn_k < 1 or a.knn_k % 2 == 0:
            raise ConfigError("attack.knn_k must be a positive odd integer")
        if a.combine not in ("latest", "mean"):
            raise ConfigError("attack.combine must be 'latest' or 'mean'")

    # ----- derived objects
    def hyper(self) -> Hyper:
        m = self.model
        return Hyper(d=m.d, lr=m.lr, batch=m.batch, local_epochs=m.local_epochs, q=m.q)

    @property
    def d2(self) -> int:
        return self.model.d2 or self.model.d

    def federation_config(self) -> FederationConfig:
        f = self.federation
        return FederationConfig(
            rounds=f.rounds,
            fraction=f.fraction,
            harvest_rounds=tuple(f.harvest_rounds) or None,
            eval_every=f.eval_every,
            patience=f.patience,
        )

    def resistance_map(self) -> dict[str, int]:
        r = self.privacy.resistance
        if isinstance(r, str):
            if r not in RESISTANCE_PRESETS:
                raise PrivacyConfigError(f"unknown resistance preset {r!r}")
            return dict(RESISTANCE_PRESETS[r])
        return dict(r)

    def budget_plan(self) -> BudgetPlan | None:
        p = self.privacy
        if p.mode == "none":
            return None
        return BudgetPlan(
            mode=p.mode,
            eps_min=p.eps_min,
            eps_max=p.eps_max,
            delta=p.delta,
            resistance=self.resistance_map(),
            lam=p.lam,
            sigma=p.sigma,
            per_epoch=p.per_epoch,
        )

    def aia_hyper(self) -> AiaHyper:
        a = self.attack
        return AiaHyper(epochs=a.aia_epochs, lr=a.aia_lr, batch=a.aia_batch)

    def data_paths(self) -> tuple[Path, Path]:
        base = Path(os.environ.get(DATA_DIR_ENV) or self.data.data_dir or ".")
        return base / self.data.ratings, base / self.data.profiles

    def config_hash(self) -> str:
        """SHA-256 over the canonical JSON of everything except the output location."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
