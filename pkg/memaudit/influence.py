"""
Influence: Checkpoint-based (TracInCP) self-influence and canary ranking.

Self-influence of (x, y) is sum_i eta_i * ||grad_w l(w_i, x, y)||^2 over the
selected checkpoints w_i. Adam has no single step size, so eta_i is the
configured base learning rate at every checkpoint.

Contract: influence v1.0.0
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .checkpoint import load_checkpoint
from .data import Dataset
from .errors import DataError, FormatError
from .nn import Model
from .store import atomic_write_text

logger = logging.getLogger(__name__)

DEFAULT_CHECKPOINTS = 10
DEFAULT_TOP_K = 15
LOSS_REDUCTION = 0.95
ETA_NOTE = "eta_i = constant base learning rate (Adam step size approximation)"


def loss_cutoff_epoch(loss_history: Sequence[float], reduction: float = LOSS_REDUCTION) -> int:
    """First epoch whose loss has covered `reduction` of the total drop."""
    losses = np.asarray(loss_history, dtype=np.float64)
    if losses.size == 0:
        raise DataError("loss history is empty")
    target = losses[0] - reduction * (losses[0] - losses.min())
    slack = 1e-12 * max(1.0, abs(losses[0]))
    return int(np.flatnonzero(losses <= target + slack)[0])


def select_checkpoints(loss_history: Sequence[float], k: int = DEFAULT_CHECKPOINTS) -> list[int]:
    """k evenly spaced epochs in [0, E*], rounded and deduplicated."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    cutoff = loss_cutoff_epoch(loss_history)
    epochs = np.unique(np.rint(np.linspace(0, cutoff, k)).astype(np.int64))
    return [int(e) for e in epochs]


@dataclass
class CheckpointEntry:
    epoch: int
    lr: float
    snapshot: Optional[dict[str, np.ndarray]] = None
    path: Optional[Path] = None

    def load(self) -> dict[str, np.ndarray]:
        if self.snapshot is not None:
            return self.snapshot
        if self.path is None:
            raise FormatError(f"checkpoint for epoch {self.epoch} has no snapshot or path")
        return load_checkpoint(self.path)


@dataclass
class CheckpointSet:
    entries: list[CheckpointEntry]
    loss_history: list[float] = field(default_factory=list)
    cutoff_epoch: Optional[int] = None

    def __post_init__(self):
        epochs = [e.epoch for e in self.entries]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise DataError(f"checkpoint epochs must be strictly increasing, got {epochs}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def epochs(self) -> list[int]:
        return [e.epoch for e in self.entries]

    def with_learning_rates(self, lrs: Union[float, Sequence[float]]) -> "CheckpointSet":
        if np.isscalar(lrs):
            lrs = [float(lrs)] * len(self.entries)
        entries = [
            CheckpointEntry(e.epoch, float(lr), e.snapshot, e.path) for e, lr in zip(self.entries, lrs)
        ]
        return CheckpointSet(entries, list(self.loss_history), self.cutoff_epoch)

    @classmethod
    def from_run(cls, run: Any, k: int = DEFAULT_CHECKPOINTS, lr: Optional[float] = None) -> "CheckpointSet":
        """Select checkpoints from a finished run's training-loss history."""
        losses = [m.train_loss for m in run.history]
        epochs = select_checkpoints(losses, k)
        eta = float(lr if lr is not None else run.config.learning_rate)
        entries = []
        for epoch in epochs:
            if epoch not in run.checkpoints:
                raise FormatError(f"missing checkpoint for epoch {epoch}")
            stored = run.checkpoints[epoch]
            if isinstance(stored, (str, Path)):
                entries.append(CheckpointEntry(epoch, eta, path=Path(stored)))
            else:
                entries.append(CheckpointEntry(epoch, eta, snapshot=stored))
        return cls(entries, losses, loss_cutoff_epoch(losses))

    def metadata(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rates": [e.lr for e in self.entries],
            "cutoff_epoch": self.cutoff_epoch,
            "eta": ETA_NOTE,
        }


@dataclass
class InfluenceRecord:
    sample_index: int
    label: int
    self_influence: float
    terms: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sample_index": self.sample_index,
            "label": self.label,
            "self_influence": self.self_influence,
            "terms": list(self.terms),
        }


def tracin_self_influence(
    checkpoints: CheckpointSet,
    model: Model,
    x: np.ndarray,
    y: int,
    sample_index: int = -1,
) -> InfluenceRecord:
    """Self-influence of one labelled example; model weights are restored afterwards."""
    x = np.asarray(x)
    batch = x if x.ndim == len(model.input_shape) + 1 else x[None]
    original = model.snapshot()
    terms: list[float] = []
    try:
        for entry in checkpoints.entries:
            model.load_snapshot(entry.load())
            sq = model.per_sample_grad_sq_norms(batch, np.array([y]))[0]
            terms.append(float(entry.lr * sq))
    finally:
        model.load_snapshot(original)
    return InfluenceRecord(int(sample_index), int(y), float(np.sum(terms)), terms)


def self_influence_table(
    checkpoints: CheckpointSet,
    model: Model,
    dataset: Dataset,
    batch_size: int = 256,
    indices: Optional[Iterable[int]] = None,
    progress: bool = False,
) -> list[InfluenceRecord]:
    """Exact per-sample self-influence for a whole dataset, batched per checkpoint."""
    if dataset.labels is None:
        raise DataError("self-influence needs labelled data")
    idx = np.arange(len(dataset)) if indices is None else np.asarray(list(indices), dtype=np.int64)
    terms = np.zeros((len(idx), len(checkpoints)), dtype=np.float64)

    original = model.snapshot()
    try:
        for j, entry in enumerate(checkpoints.entries):
            model.load_snapshot(entry.load())
            starts = range(0, len(idx), batch_size)
            for start in tqdm(starts, desc=f"influence epoch {entry.epoch}", disable=not progress, leave=False):
                chunk = idx[start:start + batch_size]
                sq = model.per_sample_grad_sq_norms(dataset.images[chunk], dataset.labels[chunk])
                terms[start:start + len(chunk), j] = entry.lr * sq
    finally:
        model.load_snapshot(original)

    totals = terms.sum(axis=1)
    logger.info("self-influence computed for %d samples over %d checkpoints", len(idx), len(checkpoints))
    return [
        InfluenceRecord(int(i), int(dataset.labels[i]), float(totals[r]), [float(t) for t in terms[r]])
        for r, i in enumerate(idx)
    ]


def rank_canaries(records: Sequence[InfluenceRecord], k: int = DEFAULT_TOP_K) -> tuple[list[int], list[int]]:
    """(top-k, bottom-k) sample indices by self-influence; ties go to the lower index."""
    if len(records) < 2 * k:
        raise DataError(f"need at least {2 * k} records to pick top/bottom {k}, got {len(records)}")
    top = sorted(records, key=lambda r: (-r.self_influence, r.sample_index))[:k]
    bottom = sorted(records, key=lambda r: (r.self_influence, r.sample_index))[:k]
    return [r.sample_index for r in top], [r.sample_index for r in bottom]


def write_influence_csv(path: Union[str, Path], records: Sequence[InfluenceRecord]) -> Path:
    path = Path(path)
    table = pd.DataFrame(
        [(r.sample_index, r.label, r.self_influence) for r in records],
        columns=["sample_index", "label", "self_influence"],
    )
    atomic_write_text(path, table.to_csv(index=False))
    return path


def read_influence_csv(path: Union[str, Path]) -> list[InfluenceRecord]:
    table = pd.read_csv(path)
    return [
        InfluenceRecord(int(row.sample_index), int(row.label), float(row.self_influence))
        for row in table.itertuples(index=False)
    ]
