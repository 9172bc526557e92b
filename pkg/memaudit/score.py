"""
Score: KL divergences, the black-box M score with its one-tailed tests, and
the white-box M_w score.

Contract: score v1.0.0
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats

from .canary import Patch, ProbeTriple, build_probe_triple, control_patches, inject_batch, inject_each, random_patch_seeds
from .data import Dataset
from .errors import ConfigError, DataError, ShapeError
from .nn import Model
from .store import atomic_write_json, atomic_write_text

logger = logging.getLogger(__name__)

EPS = 1e-12
DIST_TOLERANCE = 1e-6
DEFAULT_REFERENCES = 20
TESTS = ("reference", "welch", "paired")

RESULT_COLUMNS = [
    "canary_id", "dataset", "model", "regulariser", "seed", "n", "M", "t_stat", "p_value", "test",
]


def _check_distribution(x: np.ndarray, name: str) -> None:
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise DataError(f"{name} is not a valid distribution (negative or non-finite entries)")
    sums = x.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > DIST_TOLERANCE):
        raise DataError(f"{name} does not sum to 1 (got {np.ravel(sums)[:3]})")


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p_i || q_i) in nats, both arguments clamped below at EPS."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"length mismatch: {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    pc = np.maximum(p, EPS)
    qc = np.maximum(q, EPS)
    kl = np.sum(pc * np.log(pc / qc), axis=-1)
    return np.maximum(kl, 0.0)


def kl_divergence(p, q) -> float:
    """KL(p || q) = sum p_i ln(p_i / q_i)."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError(f"kl_divergence expects vectors, got shape {p.shape}")
    return float(kl_rows(p, q))


def one_tailed_t_test(x_u, x_r, paired: bool = False) -> tuple[float, float]:
    """
    H1: mean(x_u) > mean(x_r). Returns (t, p) with p = P(T > t).

    Welch's unequal-variance test by default; paired=True tests the per-pair
    differences against zero with n - 1 degrees of freedom. When both
    variances are zero the statistic is 0 (equal means, p = 0.5) or +/-inf.
    """
    a = np.asarray(x_u, dtype=np.float64)
    b = np.asarray(x_r, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise DataError("t-test needs at least two samples in each group")

    if paired:
        if a.shape != b.shape:
            raise ShapeError(f"paired test needs equal lengths, got {len(a)} and {len(b)}")
        d = a - b
        n = len(d)
        diff = d.mean()
        se2 = d.var(ddof=1) / n
        df = n - 1
    else:
        na, nb = len(a), len(b)
        va, vb = a.var(ddof=1) / na, b.var(ddof=1) / nb
        diff = a.mean() - b.mean()
        se2 = va + vb
        df = se2 ** 2 / (va ** 2 / (na - 1) + vb ** 2 / (nb - 1)) if se2 > 0 else float(na + nb - 2)

    if se2 <= 0.0:
        if diff == 0.0:
            return 0.0, 0.5
        return (math.inf, 0.0) if diff > 0 else (-math.inf, 1.0)

    t_stat = float(diff / math.sqrt(se2))
    p_value = float(stats.t.sf(t_stat, df))
    return t_stat, min(max(p_value, 0.0), 1.0)


def reference_test(value: float, reference) -> tuple[float, float]:
    """
    H1: value sits above the population the reference sample was drawn from.

    The p-value is the Monte Carlo rank p = (1 + #{r >= value}) / (K + 1),
    exact when value and the K references are exchangeable under the null.
    The statistic is the prediction t = (value - mean) / (sd * sqrt(1 + 1/K)).
    When every reference equals value the result is (0, 0.5).
    """
    r = np.asarray(reference, dtype=np.float64)
    if len(r) < 2:
        raise DataError("reference test needs at least two reference values")
    k = len(r)
    sd = r.std(ddof=1)
    diff = float(value - r.mean())
    if sd <= 0.0:
        if diff == 0.0:
            return 0.0, 0.5
        t_stat = math.inf if diff > 0 else -math.inf
    else:
        t_stat = diff / (sd * math.sqrt(1.0 + 1.0 / k))
    p_value = (1.0 + float(np.sum(r >= value))) / (k + 1.0)
    return float(t_stat), p_value


@dataclass
class MScoreResult:
    x_u: np.ndarray
    x_r: np.ndarray
    m: float
    t_stat: float
    p_value: float
    n: int
    test: str = "reference"
    metadata: dict[str, Any] = field(default_factory=dict)
    reference: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05

    def to_dict(self) -> dict:
        return {
            "X_u": [float(v) for v in self.x_u],
            "X_r": [float(v) for v in self.x_r],
            "M": float(self.m),
            "t_stat": float(self.t_stat),
            "p_value": float(self.p_value),
            "n": int(self.n),
            "test": self.test,
            "reference": [float(v) for v in self.reference],
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MScoreResult":
        return cls(
            x_u=np.asarray(data["X_u"], dtype=np.float64),
            x_r=np.asarray(data["X_r"], dtype=np.float64),
            m=float(data["M"]),
            t_stat=float(data["t_stat"]),
            p_value=float(data["p_value"]),
            n=int(data["n"]),
            test=data.get("test", "welch"),
            metadata=dict(data.get("metadata", {})),
            reference=np.asarray(data.get("reference", []), dtype=np.float64),
        )

    def to_row(self) -> dict:
        meta = self.metadata
        return {
            "canary_id": meta.get("canary_id"),
            "dataset": meta.get("dataset"),
            "model": meta.get("model"),
            "regulariser": meta.get("regulariser", "none"),
            "seed": meta.get("seed"),
            "n": int(self.n),
            "M": float(self.m),
            "t_stat": float(self.t_stat),
            "p_value": float(self.p_value),
            "test": self.test,
        }


def m_score(
    model: Model,
    triple: ProbeTriple,
    test: str = "reference",
    metadata: Optional[dict] = None,
    batch_size: int = 1024,
    references: int = DEFAULT_REFERENCES,
) -> MScoreResult:
    """
    Black-box memorisation score M = mean(X_u) - mean(X_r) over a probe triple.

    test="reference" (default) compares mean(X_u) with the mean divergence of
    `references` whole-set control patterns drawn like D_r's, so the unit of
    evidence is the pattern and not the image. "welch" and "paired" test the
    per-image X_u against X_r instead; they treat one fixed z_u as n
    independent draws and reject too often on models that never saw it.
    """
    if test not in TESTS:
        raise ConfigError(f"unknown test {test!r} (expected one of {', '.join(TESTS)})")
    if tuple(triple.d_c.shape[1:]) != model.input_shape:
        raise ShapeError(f"probe images {triple.d_c.shape[1:]} do not match model input {model.input_shape}")
    p_c = model.predict(triple.d_c, batch_size)
    p_u = model.predict(triple.d_u, batch_size)
    p_r = model.predict(triple.d_r, batch_size)

    x_u = kl_rows(p_c, p_u)
    x_r = kl_rows(p_c, p_r)
    m = float(x_u.mean() - x_r.mean())

    reference = np.zeros(0)
    if test == "reference":
        reference = np.array([
            kl_rows(p_c, model.predict(inject_batch(triple.d_c, z), batch_size)).mean()
            for z in triple.reference_patches(references)
        ])
        t_stat, p_value = reference_test(float(x_u.mean()), reference)
    else:
        t_stat, p_value = one_tailed_t_test(x_u, x_r, paired=test == "paired")
    logger.debug("M=%.6g t=%.3f p=%.3g (n=%d, %s)", m, t_stat, p_value, len(x_u), test)
    return MScoreResult(
        x_u=x_u,
        x_r=x_r,
        m=m,
        t_stat=t_stat,
        p_value=p_value,
        n=len(x_u),
        test=test,
        metadata=dict(metadata or {}),
        reference=reference,
    )


@dataclass
class MwScoreResult:
    m_w: float
    mean_p_unique: float
    mean_p_random: float
    mean_log_unique: float
    mean_log_random: float
    terms: np.ndarray
    label: int
    n: int
    t_stat: Optional[float] = None
    p_value: Optional[float] = None
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "M_w": float(self.m_w),
            "mean_p_unique": float(self.mean_p_unique),
            "mean_p_random": float(self.mean_p_random),
            "mean_log_unique": float(self.mean_log_unique),
            "mean_log_random": float(self.mean_log_random),
            "terms": [float(v) for v in self.terms],
            "label": int(self.label),
            "n": int(self.n),
            "t_stat": self.t_stat,
            "p_value": self.p_value,
            "metadata": dict(self.metadata),
        }


def mw_score(
    model: Model,
    d_y: Dataset,
    z_u: Patch,
    seed: int,
    label: Optional[int] = None,
    metadata: Optional[dict] = None,
    batch_size: int = 1024,
    matched: bool = True,
) -> MwScoreResult:
    """
    White-box score: mean of log P(y | x + z_u) - log P(y | x + z_r) over D_y.

    Every image gets its own control patch z_r, a shuffle of z_u when
    matched. Probabilities are clamped at 1e-12 before the log. The p-value
    is a paired one-tailed test on the per-image terms.
    """
    if len(d_y) == 0:
        raise DataError("D_y is empty")
    if label is None:
        if d_y.labels is None:
            raise DataError("D_y needs labels or an explicit label")
        label = int(d_y.labels[0])
    if d_y.labels is not None and np.any(d_y.labels != label):
        raise DataError(f"every image in D_y must carry label {label}")

    seeds = random_patch_seeds(seed, len(d_y))
    x_u = inject_batch(d_y.images, z_u)
    x_r = inject_each(d_y.images, control_patches(z_u, seeds, matched))

    p_u = model.predict(x_u, batch_size)[:, label].astype(np.float64)
    p_r = model.predict(x_r, batch_size)[:, label].astype(np.float64)
    log_u = np.log(np.maximum(p_u, EPS))
    log_r = np.log(np.maximum(p_r, EPS))
    terms = log_u - log_r

    t_stat = p_value = None
    if len(terms) >= 2:
        t_stat, p_value = one_tailed_t_test(log_u, log_r, paired=True)

    return MwScoreResult(
        m_w=float(terms.mean()),
        mean_p_unique=float(p_u.mean()),
        mean_p_random=float(p_r.mean()),
        mean_log_unique=float(log_u.mean()),
        mean_log_random=float(log_r.mean()),
        terms=terms,
        label=int(label),
        n=len(terms),
        t_stat=t_stat,
        p_value=p_value,
        metadata=dict(metadata or {}),
    )


@dataclass
class ScoreSpread:
    """Spread of one score over repeated evaluations with fresh random patches."""
    values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values, ddof=1)) if len(self.values) > 1 else 0.0

    @property
    def range(self) -> float:
        return float(np.max(self.values) - np.min(self.values))

    def to_dict(self) -> dict:
        return {"values": list(self.values), "mean": self.mean, "std": self.std, "range": self.range}


def m_score_spread(model: Model, ood: Dataset, z_u: Patch, seeds: Sequence[int], matched: bool = True) -> ScoreSpread:
    """Re-evaluate M on a fixed model, drawing a fresh control-patch set per seed."""
    # only M is kept, so skip the reference patterns
    values = [m_score(model, build_probe_triple(ood, z_u, s, matched), test="welch").m for s in seeds]
    return ScoreSpread(values)


def mw_score_spread(
    model: Model,
    d_y: Dataset,
    z_u: Patch,
    seeds: Sequence[int],
    label: Optional[int] = None,
    matched: bool = True,
) -> ScoreSpread:
    """Re-evaluate M_w on a fixed model and D_y, one control-patch draw per seed."""
    values = [mw_score(model, d_y, z_u, s, label=label, matched=matched).m_w for s in seeds]
    return ScoreSpread(values)


def write_result_json(path: Union[str, Path], result: Union[MScoreResult, MwScoreResult]) -> Path:
    path = Path(path)
    atomic_write_json(path, result.to_dict())
    return path


def load_result_json(path: Union[str, Path]) -> MScoreResult:
    with open(path, "r", encoding="utf-8") as f:
        return MScoreResult.from_dict(json.load(f))


def append_results_csv(
    path: Union[str, Path],
    rows: Sequence[dict],
    unique_on: Optional[Sequence[str]] = None,
) -> pd.DataFrame:
    """
    Append rows to the results table, creating it with the canonical columns.

    With unique_on, earlier rows sharing those column values are replaced.
    """
    path = Path(path)
    new = pd.DataFrame(list(rows), columns=RESULT_COLUMNS)
    if path.exists() and path.stat().st_size > 0:
        old = pd.read_csv(path, dtype={"canary_id": str, "seed": str})
        new = new.astype({"canary_id": str, "seed": str})
        table = pd.concat([old, new], ignore_index=True)
    else:
        table = new
    if unique_on:
        table = table.drop_duplicates(subset=list(unique_on), keep="last").reset_index(drop=True)
    atomic_write_text(path, table.to_csv(index=False))
    return table
