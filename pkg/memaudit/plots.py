"""
Plots: SVG figures for audits and characterisation runs.

Contract: analysis v1.0.0
"""

from __future__ import annotations

import io
from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import ActivationMask, MProfile, SeedVariation  # noqa: E402
from .score import MScoreResult  # noqa: E402
from .store import atomic_write_bytes  # noqa: E402

PathLike = Union[str, Path]

# Fixed ids and no timestamp so reruns produce identical files
plt.rcParams["svg.hashsalt"] = "memaudit"


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    buffer = io.BytesIO()
    try:
        fig.savefig(buffer, format="svg", bbox_inches="tight", metadata={"Date": None})
    finally:
        plt.close(fig)
    atomic_write_bytes(path, buffer.getvalue())
    return path


def divergence_histogram(result: MScoreResult, path: PathLike, bins: int = 40) -> Path:
    """X_u vs X_r distributions of one audit."""
    fig, ax = plt.subplots(figsize=(6, 4))
    upper = max(float(np.max(result.x_u, initial=0.0)), float(np.max(result.x_r, initial=0.0)), 1e-12)
    edges = np.linspace(0.0, upper, bins + 1)
    ax.hist(result.x_r, bins=edges, alpha=0.6, label="random patch (X_r)")
    ax.hist(result.x_u, bins=edges, alpha=0.6, label="unique patch (X_u)")
    ax.set_xlabel("KL divergence from clean output (nats)")
    ax.set_ylabel("images")
    ax.set_title(f"M = {result.m:.4g}, p = {result.p_value:.3g} ({result.test})")
    ax.legend()
    return _save(fig, path)


def activation_masks(unique: ActivationMask, random: ActivationMask, path: PathLike) -> Path:
    fig, axes = plt.subplots(2, 1, figsize=(8, 4), sharex=True)
    units = np.arange(unique.width)
    for ax, mask, colour in ((axes[0], unique, "tab:red"), (axes[1], random, "tab:blue")):
        ax.bar(units, mask.values, color=colour, width=1.0)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel(f"{mask.kind}")
    axes[1].set_xlabel("hidden unit (last ReLU layer)")
    axes[0].set_title(f"Activation frequency over {unique.model_count} models")
    return _save(fig, path)


def m_profile_plot(profile: MProfile, path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(profile.epochs, profile.scores, marker="o")
    significant = [(e, m) for e, m, p in profile.entries if p < 0.05]
    if significant:
        ax.scatter(*zip(*significant), color="tab:red", zorder=3, label="p < 0.05")
        ax.legend()
    ax.axhline(0.0, color="grey", linewidth=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("M")
    return _save(fig, path)


def seed_variation_plot(values: dict, report: Sequence[SeedVariation], path: PathLike, label: str = "M") -> Path:
    """Score per seed for every canary, one column per canary."""
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(report)), 4))
    for x, row in enumerate(report):
        ys = values[row.canary_id]
        ys = [float(getattr(v, "m", v)) for v in ys]
        ax.scatter([x] * len(ys), ys, color="tab:red" if row.spans_zero else "tab:blue", s=16)
    ax.axhline(0.0, color="grey", linewidth=0.8)
    ax.set_xticks(range(len(report)))
    ax.set_xticklabels([str(r.canary_id) for r in report], rotation=90)
    ax.set_xlabel("canary")
    ax.set_ylabel(label)
    return _save(fig, path)
