"""Element-wise clipping and per-component Laplace/Gaussian perturbation.

The adaptive mode assigns each model component a resistance level ``l`` in
0..3 and perturbs its parameters with ``Laplace(0, 2*delta / p)`` where
``p = eps_min + (eps_max - eps_min) / 3 * l``.  Low resistance (level 0)
gets the smallest budget and therefore the largest noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .recommender import COMPONENTS, ParamSet

MODES = ("adaptive", "fixed", "gaussian", "off")
TAGS = tuple(COMPONENTS)  # ("User", "Item", "MLP1", "MLP2")

# vulnerability ordering observed for the per-component attacks (default)
RESISTANCE_DEFAULT: dict[str, int] = {"User": 0, "MLP1": 1, "MLP2": 2, "Item": 3}
# literal resistance table of the original formulation
RESISTANCE_LITERAL: dict[str, int] = {"User": 0, "Item": 1, "MLP1": 2, "MLP2": 3}
RESISTANCE_PRESETS = {"default": RESISTANCE_DEFAULT, "literal": RESISTANCE_LITERAL}


class PrivacyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BudgetPlan:
    """Perturbation settings for uploads.

    ``lam`` is the Laplace scale of ``fixed`` mode; ``sigma`` is the Gaussian
    standard deviation of ``gaussian`` mode (derived from ``lam`` by variance
    matching when left unset).  ``per_epoch`` perturbs after every local
    epoch instead of once before upload.
    """

    mode: str = "adaptive"
    eps_min: float = 30.0
    eps_max: float = 60.0
    delta: float = 0.5
    resistance: Mapping[str, int] = field(default_factory=lambda: dict(RESISTANCE_DEFAULT))
    lam: float | None = None
    sigma: float | None = None
    per_epoch: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise PrivacyConfigError(f"unknown privacy mode {self.mode!r}")
        if self.delta <= 0:
            raise PrivacyConfigError("clip bound delta must be positive")
        if self.mode == "adaptive":
            if not 0 < self.eps_min <= self.eps_max:
                raise PrivacyConfigError("need 0 < eps_min <= eps_max")
            missing = set(TAGS) - set(self.resistance)
            if missing:
                raise PrivacyConfigError(f"resistance map misses {sorted(missing)}")
            for tag, level in self.resistance.items():
                if tag not in TAGS or level not in (0, 1, 2, 3):
                    raise PrivacyConfigError(f"bad resistance entry {tag}={level}")
        if self.mode == "fixed" and not (self.lam is not None and self.lam >= 0):
            raise PrivacyConfigError("fixed mode needs lam >= 0")
        if self.mode == "gaussian" and self.sigma is None and self.lam is None:
            raise PrivacyConfigError("gaussian mode needs sigma or lam")

    def tag_scales(self) -> dict[str, float]:
        """Noise parameter per component tag (Laplace scale, or Gaussian std)."""
        if self.mode == "adaptive":
            return {t: noise_scale(t, self) for t in TAGS}
        if self.mode == "fixed":
            return {t: float(self.lam) for t in TAGS}
        if self.mode == "gaussian":
            s = self.sigma if self.sigma is not None else gaussian_sigma_for(self.lam)
            return {t: float(s) for t in TAGS}
        return {t: 0.0 for t in TAGS}


def fixed_plan(eps: float, delta: float = 0.5, **kw) -> BudgetPlan:
    """Single-budget Laplace plan with ``lam = 2*delta/eps``."""
    return BudgetPlan(mode="fixed", lam=2 * delta / eps, delta=delta, eps_min=eps, eps_max=eps, **kw)


def clip_params(theta: ParamSet, delta: float) -> ParamSet:
    if delta <= 0:
        raise PrivacyConfigError("delta must be positive")
    return theta.with_flat(np.clip(theta.flat, -delta, delta))


def budget(tag: str, plan: BudgetPlan) -> float:
    b = (plan.eps_max - plan.eps_min) / 3.0
    return plan.eps_min + b * plan.resistance[tag]


def noise_scale(tag: str, plan: BudgetPlan) -> float:
    if plan.mode != "adaptive":
        raise PrivacyConfigError("noise_scale is defined for adaptive plans")
    p = budget(tag, plan)
    if p <= 0:
        raise PrivacyConfigError(f"non-positive budget {p} for {tag}")
    return 2.0 * plan.delta / p


def laplace_from_uniform(u, lam: float):
    """Inverse-CDF transform of ``u`` in (-1/2, 1/2) to a Laplace(0, lam) draw."""
    u = np.asarray(u, dtype=float)
    return -lam * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def sample_laplace(lam: float, rng: np.random.Generator, size=None):
    if lam <= 0:
        raise ValueError("Laplace scale must be positive")
    u = rng.random(size) - 0.5
    out = laplace_from_uniform(u, lam)
    return out if size is not None else float(out)


def gaussian_sigma_for(lam: float) -> float:
    """Gaussian std with the same variance (``2 lam^2``) as Laplace(0, lam)."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    return lam * math.sqrt(2.0)


def perturb(theta: ParamSet, plan: BudgetPlan, rng: np.random.Generator) -> ParamSet:
    """Clip element-wise to ``[-delta, delta]`` and add per-component noise."""
    out = clip_params(theta, plan.delta)
    if plan.mode == "off":
        return out
    scales = plan.tag_scales()
    for tag, names in COMPONENTS.items():
        s = scales[tag]
        if s == 0:
            continue
        for name in names:
            a, b = out.offsets[name]
            if plan.mode == "gaussian":
                out.flat[a:b] += rng.normal(0.0, s, b - a)
            else:
                out.flat[a:b] += sample_laplace(s, rng, b - a)
    return out


def laplace_log_density(x, loc, lam: float):
    return -np.log(2 * lam) - np.abs(np.asarray(x) - loc) / lam
