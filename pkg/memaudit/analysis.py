"""
Analysis: Latent localisation, per-epoch M profiles, seed variation and
influence/memorisation correlation.

Contract: analysis v1.0.0
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .canary import Patch, ProbeTriple, control_patches, inject, inject_batch, inject_each, random_patch_seeds
from .errors import ConfigError, DataError, ShapeError, TrainingError
from .influence import CheckpointSet, tracin_self_influence
from .nn import Model
from .score import DEFAULT_REFERENCES, MScoreResult, ScoreSpread, m_score

logger = logging.getLogger(__name__)


@dataclass
class ActivationMask:
    """Per-unit frequency (max-normalised) with which a patch newly excites a hidden unit."""
    values: np.ndarray
    model_count: int
    kind: str
    image_count: int = 0

    @property
    def width(self) -> int:
        return len(self.values)

    def top_units(self, k: int = 5) -> list[int]:
        order = sorted(range(self.width), key=lambda i: (-self.values[i], i))
        return order[:k]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "model_count": self.model_count,
            "image_count": self.image_count,
            "values": [float(v) for v in self.values],
        }


def _excitation(model: Model, clean: np.ndarray, patched: np.ndarray) -> np.ndarray:
    """Binarise, subtract the clean pattern, re-binarise; averaged over images."""
    on_clean = (model.hidden_activations(clean) > 0).astype(np.int8)
    on_patched = (model.hidden_activations(patched) > 0).astype(np.int8)
    gained = np.clip(on_patched - on_clean, 0, 1)
    return gained.mean(axis=0)


def _normalise(total: np.ndarray) -> np.ndarray:
    peak = total.max() if total.size else 0.0
    return total / peak if peak > 0 else np.zeros_like(total)


def latent_localisation(
    models: Sequence[Model],
    clean_images: np.ndarray,
    z_u: Union[Patch, Sequence[Patch]],
    seed: int = 0,
    matched: bool = True,
) -> tuple[ActivationMask, ActivationMask]:
    """
    Hidden units of the last ReLU layer excited by z_u, and by random patches.

    z_u is one patch shared by every model or one patch per model (each model
    scored with its own canary). Both masks average over images and models,
    then divide by their maximum.
    """
    if not models:
        raise DataError("latent localisation needs at least one model")
    patches = [z_u] * len(models) if isinstance(z_u, Patch) else list(z_u)
    if len(patches) != len(models):
        raise ShapeError(f"{len(patches)} patches for {len(models)} models")
    signature = (models[0].architecture, tuple(models[0].hidden_widths), models[0].input_shape)
    for m in models[1:]:
        if (m.architecture, tuple(m.hidden_widths), m.input_shape) != signature:
            raise ConfigError(f"architecture mismatch: {m.model_id} vs {models[0].model_id}")

    clean = np.asarray(clean_images, dtype=np.float32)
    seeds = random_patch_seeds(seed, len(clean))

    u_total = np.zeros(0)
    r_total = np.zeros(0)
    for model, patch in zip(models, patches):
        u = _excitation(model, clean, inject_batch(clean, patch))
        r = _excitation(model, clean, inject_each(clean, control_patches(patch, seeds, matched)))
        u_total = u if u_total.size == 0 else u_total + u
        r_total = r if r_total.size == 0 else r_total + r

    count = len(models)
    return (
        ActivationMask(_normalise(u_total / count), count, "unique", len(clean)),
        ActivationMask(_normalise(r_total / count), count, "random", len(clean)),
    )


def localised_units(unique: ActivationMask, random: ActivationMask, high: float = 0.5, low: float = 0.2) -> list[int]:
    """Units strongly excited by the unique feature but not by random patches."""
    return [i for i in range(unique.width) if unique.values[i] >= high and random.values[i] <= low]


@dataclass
class MProfile:
    entries: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def epochs(self) -> list[int]:
        return [e for e, _, _ in self.entries]

    @property
    def scores(self) -> list[float]:
        return [m for _, m, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def to_dict(self) -> dict:
        return {"entries": [{"epoch": e, "M": m, "p_value": p} for e, m, p in self.entries]}


def m_profile(run, triple: ProbeTriple, test: str = "reference", references: int = DEFAULT_REFERENCES) -> MProfile:
    """M at every stored checkpoint of a run, in epoch order."""
    epochs = sorted(run.checkpoints)
    if not epochs:
        raise TrainingError("run has no stored checkpoints")
    model = run.model()
    entries = []
    for epoch in epochs:
        model.load_snapshot(run.checkpoint_weights(epoch))
        result = m_score(model, triple, test=test, references=references)
        entries.append((epoch, result.m, result.p_value))
        logger.debug("epoch %d: M=%.6g p=%.3g", epoch, result.m, result.p_value)
    return MProfile(entries)


@dataclass
class SeedVariation:
    canary_id: Union[int, str]
    n: int
    min: float
    max: float
    range: float
    positive: int
    negative: int
    spans_zero: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _value(r: Union[float, MScoreResult]) -> float:
    return float(r.m) if isinstance(r, MScoreResult) else float(r)


def seed_variation_report(
    results: Mapping[Union[int, str], Sequence[Union[float, MScoreResult]]],
) -> list[SeedVariation]:
    """Per-canary spread of a score across seeds, sorted by canary id."""
    report = []
    for cid in sorted(results, key=str):
        values = np.array([_value(r) for r in results[cid]], dtype=np.float64)
        if len(values) < 2:
            raise DataError(f"canary {cid}: need at least two seeds, got {len(values)}")
        lo, hi = float(values.min()), float(values.max())
        report.append(SeedVariation(
            canary_id=cid,
            n=len(values),
            min=lo,
            max=hi,
            range=hi - lo,
            positive=int(np.sum(values > 0)),
            negative=int(np.sum(values < 0)),
            spans_zero=lo < 0.0 < hi,
        ))
    return report


def influence_memorisation_correlation(influences: Sequence[float], m_scores: Sequence[float]) -> float:
    """Pearson r between self-influence and memorisation score."""
    x = np.asarray(influences, dtype=np.float64)
    y = np.asarray(m_scores, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError(f"length mismatch: {len(x)} influences vs {len(y)} scores")
    if len(x) < 3:
        raise DataError("correlation needs at least three pairs")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DataError("correlation undefined for zero-variance input")
    r = stats.pearsonr(x, y)[0]
    return float(np.clip(r, -1.0, 1.0))


@dataclass
class EscalationSummary:
    ks: list[int]
    medians: list[float]
    p_at_max: float
    increasing_from: int
    strictly_increasing: bool

    def to_dict(self) -> dict:
        return asdict(self)


def escalation_summary(
    results_by_k: Mapping[int, Sequence[MScoreResult]],
    increasing_from: int = 10,
) -> EscalationSummary:
    """Median M per number of injected images and whether it rises strictly from `increasing_from` on."""
    if not results_by_k:
        raise DataError("no results")
    ks = sorted(results_by_k)
    medians = [float(np.median([r.m for r in results_by_k[k]])) for k in ks]
    tail = [m for k, m in zip(ks, medians) if k >= increasing_from]
    strictly = all(b > a for a, b in zip(tail, tail[1:]))
    p_at_max = float(np.median([r.p_value for r in results_by_k[ks[-1]]]))
    return EscalationSummary(ks, medians, p_at_max, increasing_from, strictly)


def evaluation_noise(seed_variation: Sequence[SeedVariation], spread: ScoreSpread) -> dict:
    """Compare how far M moves across training seeds with how far it moves on re-evaluation."""
    if not seed_variation:
        raise DataError("no seed variation entries")
    seed_range = float(np.median([v.range for v in seed_variation]))
    return {
        "median_seed_range": seed_range,
        "evaluation_std": spread.std,
        "evaluation_range": spread.range,
        "seed_dominates": seed_range > spread.range,
    }


@dataclass
class InfluenceShift:
    sample_index: int
    before: float
    after: float

    @property
    def ratio(self) -> float:
        return self.after / self.before if self.before > 0 else float("inf")

    @property
    def orders_of_magnitude(self) -> float:
        if self.before <= 0:
            return float("inf")
        return float(np.log10(max(self.after, 1e-300) / self.before))

    def to_dict(self) -> dict:
        return {**asdict(self), "ratio": self.ratio}


def self_influence_shift(
    clean_run,
    canary_run,
    images: np.ndarray,
    labels: np.ndarray,
    index: int,
    patch: Patch,
    k: int = 10,
) -> InfluenceShift:
    """Self-influence of one sample trained clean vs trained with the unique feature injected."""
    x_clean = np.asarray(images[index])
    y = int(labels[index])
    before = tracin_self_influence(
        CheckpointSet.from_run(clean_run, k), clean_run.model(), x_clean, y, sample_index=index,
    )
    after = tracin_self_influence(
        CheckpointSet.from_run(canary_run, k), canary_run.model(), inject(x_clean, patch), y, sample_index=index,
    )
    return InfluenceShift(int(index), before.self_influence, after.self_influence)
