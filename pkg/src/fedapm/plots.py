"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MASK_ORDER = ("Full", "User", "Item", "MLP1", "MLP2")
STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _save(fig, path: Path, tag: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Description": tag})
    plt.close(fig)
    return path


def component_f1(rows: Sequence[dict], path: Path, tag: str = "", zeta: float | None = None) -> Path:
    """Grouped bars of mean F1 per component mask, one panel per attribute."""
    with plt.rc_context(STYLE):
        attrs = sorted({r["attribute"] for r in rows})
        attackers = [a for a in ("aia", "knn", "random") if any(r["attacker"] == a for r in rows)]
        fig, axes = plt.subplots(1, max(1, len(attrs)), figsize=(4.2 * max(1, len(attrs)), 3.0), squeeze=False)
        for ax, attr in zip(axes[0], attrs):
            vals = defaultdict(list)
            for r in rows:
                if r["attribute"] == attr and (zeta is None or r["zeta"] == zeta):
                    vals[(r["attacker"], r["component_mask"])].append(r["f1"])
            masks = [m for m in MASK_ORDER if any(k[1] == m for k in vals)]
            width = 0.8 / max(1, len(attackers))
            x = np.arange(len(masks))
            for j, att in enumerate(attackers):
                means = [np.mean(vals.get((att, m), [np.nan])) for m in masks]
                errs = [np.std(vals.get((att, m), [np.nan])) for m in masks]
                ax.bar(x + (j - (len(attackers) - 1) / 2) * width, means, width, yerr=errs, label=att, capsize=2)
            ax.set_xticks(x, masks)
            ax.set_ylim(0, 1)
            ax.set_title(attr)
            ax.set_ylabel("macro F1")
        axes[0][0].legend(loc="upper right")
        fig.tight_layout()
        return _save(fig, path, tag)


def training_curve(log_rows: Sequence, path: Path, tag: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        ax.plot([r.round for r in log_rows], [r.mean_loss for r in log_rows], marker="o", ms=3)
        ax.set_xlabel("round")
        ax.set_ylabel("mean local loss")
        fig.tight_layout()
        return _save(fig, path, tag)


def sweep_curves(points: Sequence[dict], param: str, path: Path, tag: str = "") -> Path:
    """Hit@K and AIA F1 against a swept parameter.

    ``points`` are dicts with keys ``value``, ``hit`` and optionally
    ``f1_<attribute>``.
    """
    with plt.rc_context(STYLE):
        pts = sorted(points, key=lambda p: p["value"])
        xs = [p["value"] for p in pts]
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        ax.plot(xs, [p["hit"] for p in pts], marker="o", label="Hit@K")
        for key in sorted({k for p in pts for k in p if k.startswith("f1_")}):
            ax.plot(xs, [p.get(key, np.nan) for p in pts], marker="s", ls="--", label=key.replace("f1_", "F1 "))
        ax.set_xlabel(param)
        ax.legend()
        fig.tight_layout()
        return _save(fig, path, tag)
