"""
Trainer: Deterministic Adam training with early stopping and checkpointing.

Contract: trainer v1.0.0
"""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .canary import build_canary_dataset
from .checkpoint import load_checkpoint, save_checkpoint
from .config import CanarySpec, TrainConfig
from .data import Dataset, augment_batch, split_train_validation
from .errors import ConfigError, DataError, NonFiniteError, ShapeError, TrainingError
from .influence import select_checkpoints
from .nn import INPUT_SHAPES, Model, build_model
from .optim import AdamState, adam_step
from .store import atomic_write_json, atomic_write_text, read_json

logger = logging.getLogger(__name__)

SPLIT_NOTE = "validation: seeded class-stratified hold-out of the train split; canary images always kept for training"
EVAL_EPS = 1e-12


@dataclass(frozen=True)
class RunSeeds:
    """Independent RNG streams for one (seed, canary) cell."""
    init: int
    split: int
    shuffle: int
    dropout: int
    augment: int

    @classmethod
    def derive(cls, seed: int, canary_key: Union[str, int, None] = None) -> "RunSeeds":
        key = hashlib.sha256(str(canary_key if canary_key is not None else "none").encode("utf-8")).digest()
        root = np.random.SeedSequence([int(seed), int.from_bytes(key[:8], "little")])
        streams = [int(child.generate_state(1, dtype=np.uint64)[0]) for child in root.spawn(5)]
        return cls(*streams)


class EarlyStopping:
    """Tracks the lowest validation loss; stop once `patience` epochs pass without a strict improvement."""

    def __init__(self, patience: int = 10):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_epoch: Optional[int] = None
        self.best_loss = float("inf")
        self.last_epoch: Optional[int] = None

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; True if it is the new best."""
        self.last_epoch = epoch
        if self.best_epoch is None or val_loss < self.best_loss:
            self.best_epoch = epoch
            self.best_loss = float(val_loss)
            return True
        return False

    @property
    def should_stop(self) -> bool:
        if self.best_epoch is None or self.last_epoch is None:
            return False
        return self.last_epoch - self.best_epoch >= self.patience


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class RunArtifacts:
    config: TrainConfig
    best_epoch: int
    best_weights: dict[str, np.ndarray]
    history: list[EpochMetrics]
    checkpoints: dict[int, Union[Path, dict[str, np.ndarray]]] = field(default_factory=dict)
    canary_indices: list[int] = field(default_factory=list)
    train_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    val_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    started: str = ""
    finished: str = ""
    wall_clock: float = 0.0
    weights_hash: str = ""
    run_dir: Optional[Path] = None

    @property
    def best_metrics(self) -> EpochMetrics:
        return next(m for m in self.history if m.epoch == self.best_epoch)

    @property
    def stored_epochs(self) -> list[int]:
        return sorted(self.checkpoints)

    def model(self) -> Model:
        """Fresh model carrying the best-epoch weights."""
        model = build_model(
            self.config.architecture,
            self.config.num_classes,
            self.config.regularisers,
            seed=0,
        )
        model.load_snapshot(self.best_weights)
        return model.eval()

    def checkpoint_weights(self, epoch: int) -> dict[str, np.ndarray]:
        if epoch not in self.checkpoints:
            raise TrainingError(f"no checkpoint stored for epoch {epoch}")
        stored = self.checkpoints[epoch]
        return load_checkpoint(stored) if isinstance(stored, (str, Path)) else stored

    def summary(self) -> dict:
        best = self.best_metrics
        return {
            "config": self.config.to_dict(),
            "best_epoch": self.best_epoch,
            "best_val_loss": best.val_loss,
            "best_val_acc": best.val_acc,
            "epochs_run": self.history[-1].epoch,
            "checkpoint_epochs": self.stored_epochs,
            "canary_indices": list(self.canary_indices),
            "train_size": int(len(self.train_indices)),
            "val_size": int(len(self.val_indices)),
            "validation_split": SPLIT_NOTE,
            "started": self.started,
            "finished": self.finished,
            "wall_clock_seconds": self.wall_clock,
            "weights_hash": self.weights_hash,
        }


def evaluate(model: Model, data: Dataset, batch_size: int = 1024) -> tuple[float, float]:
    """Mean cross-entropy (probabilities clamped at 1e-12) and top-1 accuracy in eval mode."""
    if len(data) == 0:
        raise DataError(f"cannot evaluate on empty dataset {data.name}")
    if data.labels is None:
        raise DataError(f"{data.name} has no labels")
    if data.shape != model.input_shape:
        raise ShapeError(f"{data.name} images {data.shape} do not match model input {model.input_shape}")
    probs = model.predict(data.images, batch_size).astype(np.float64)
    picked = probs[np.arange(len(data)), data.labels]
    loss = float(np.mean(-np.log(np.maximum(picked, EVAL_EPS))))
    acc = float(np.mean(np.argmax(probs, axis=1) == data.labels))
    return loss, acc


def run_name(config: TrainConfig) -> str:
    regs = config.regulariser_label
    middle = f"-{regs}" if regs != "none" else ""
    return f"{config.dataset}-{config.architecture}{middle}-c{config.canary.key}-s{config.seed}"


def _checkpoint_path(run_dir: Path, epoch: int) -> Path:
    return run_dir / "checkpoints" / f"epoch_{epoch:04d}.maud"


def train(
    config: TrainConfig,
    data: Dataset,
    run_dir: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> RunArtifacts:
    """
    Train one model on `data` (clean train split); the config.canary indices are
    injected here. Returns best-epoch weights and per-epoch history; epoch 0 is
    the untrained initialisation.
    """
    expected = INPUT_SHAPES[config.architecture]
    if data.shape != expected:
        raise ShapeError(f"{config.architecture} expects {expected} images, got {data.shape}")
    if data.labels is None:
        raise DataError("training data needs labels")

    run_dir = Path(run_dir) if run_dir is not None else None
    seeds = RunSeeds.derive(config.seed, config.canary.key)
    canary_indices = list(config.canary.indices)
    if canary_indices:
        data = build_canary_dataset(data, canary_indices, config.canary.patch())

    train_idx, val_idx = split_train_validation(data, config.validation_fraction, seeds.split, canary_indices)
    if len(val_idx) == 0:
        raise ConfigError("validation split is empty; use more data or a larger validation fraction")
    train_set = data.subset(train_idx)
    val_set = data.subset(val_idx)

    model = build_model(config.architecture, config.num_classes, config.regularisers, seed=seeds.init)
    optimiser = AdamState.for_params(model.parameters(), lr=config.learning_rate)

    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    stopper = EarlyStopping(config.patience)
    history: list[EpochMetrics] = []
    checkpoints: dict[int, Union[Path, dict[str, np.ndarray]]] = {}
    best_weights: dict[str, np.ndarray] = {}

    def record(epoch: int) -> None:
        nonlocal best_weights
        train_loss, train_acc = evaluate(model, train_set)
        val_loss, val_acc = evaluate(model, val_set)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingError(f"non-finite loss at epoch {epoch}: train={train_loss} val={val_loss}")
        history.append(EpochMetrics(epoch, train_loss, train_acc, val_loss, val_acc))
        snap = model.snapshot()
        if run_dir is not None:
            checkpoints[epoch] = save_checkpoint(_checkpoint_path(run_dir, epoch), snap)
        else:
            checkpoints[epoch] = snap
        if stopper.update(epoch, val_loss):
            best_weights = snap
        logger.info(
            "epoch %d: train_loss=%.4f val_loss=%.4f val_acc=%.4f",
            epoch, train_loss, val_loss, val_acc,
        )

    logger.info(
        "training %s on %s (seed %d, canary %s, %d train / %d val)",
        model.model_id, data.name, config.seed, config.canary.key, len(train_set), len(val_set),
    )
    record(0)

    n = len(train_set)
    epochs = tqdm(range(1, config.max_epochs + 1), desc=run_name(config), disable=not progress)
    for epoch in epochs:
        order = np.random.default_rng([seeds.shuffle, epoch]).permutation(n)
        model.train()
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            images = train_set.images[idx]
            if config.augmentation:
                images = augment_batch(images, config.dataset, [seeds.augment, epoch, b])
            model.rng = np.random.default_rng([seeds.dropout, epoch, b])
            try:
                _, grads = model.loss_and_grads(images, train_set.labels[idx])
            except NonFiniteError as e:
                raise TrainingError(f"epoch {epoch}, batch {b}: {e} (lr={config.learning_rate})") from e
            adam_step(optimiser, model.parameters(), grads)
        model.eval()
        record(epoch)
        if stopper.should_stop:
            logger.info("early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break

    model.load_snapshot(best_weights)

    if config.checkpoint_policy == "selected":
        keep = set(select_checkpoints([m.train_loss for m in history], config.checkpoints_k))
        # the served weights and the last state stay inspectable
        keep |= {int(stopper.best_epoch), history[-1].epoch}
        for epoch in sorted(set(checkpoints) - keep):
            stored = checkpoints.pop(epoch)
            if isinstance(stored, Path):
                stored.unlink(missing_ok=True)

    run = RunArtifacts(
        config=config,
        best_epoch=int(stopper.best_epoch),
        best_weights=best_weights,
        history=history,
        checkpoints=checkpoints,
        canary_indices=canary_indices,
        train_indices=train_idx,
        val_indices=val_idx,
        started=started,
        finished=datetime.now(timezone.utc).isoformat(),
        wall_clock=time.perf_counter() - t0,
        weights_hash=model.weights_hash(),
        run_dir=run_dir,
    )
    if run_dir is not None:
        save_run(run, run_dir)
    return run


# ------------------------------
# Run directory
# ------------------------------

def save_run(run: RunArtifacts, run_dir: Union[str, Path]) -> Path:
    """metrics.csv, best.maud, split.maud and report.json; checkpoints are written during training."""
    run_dir = Path(run_dir)
    table = pd.DataFrame([asdict(m) for m in run.history], columns=["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
    atomic_write_text(run_dir / "metrics.csv", table.to_csv(index=False))
    save_checkpoint(run_dir / "best.maud", run.best_weights)
    save_checkpoint(run_dir / "split.maud", {
        "train_indices": np.asarray(run.train_indices, dtype=np.int64),
        "val_indices": np.asarray(run.val_indices, dtype=np.int64),
    })
    for epoch, stored in list(run.checkpoints.items()):
        if not isinstance(stored, (str, Path)):
            run.checkpoints[epoch] = save_checkpoint(_checkpoint_path(run_dir, epoch), stored)
    atomic_write_json(run_dir / "report.json", run.summary())
    run.run_dir = run_dir
    return run_dir


def load_run(run_dir: Union[str, Path]) -> RunArtifacts:
    run_dir = Path(run_dir)
    report_path = run_dir / "report.json"
    if not report_path.exists():
        raise TrainingError(f"no completed run in {run_dir} (report.json missing)")
    report = read_json(report_path)
    table = pd.read_csv(run_dir / "metrics.csv")
    history = [
        EpochMetrics(int(r.epoch), float(r.train_loss), float(r.train_acc), float(r.val_loss), float(r.val_acc))
        for r in table.itertuples(index=False)
    ]
    checkpoints: dict[int, Union[Path, dict]] = {}
    for epoch in report.get("checkpoint_epochs", []):
        path = _checkpoint_path(run_dir, int(epoch))
        if path.exists():
            checkpoints[int(epoch)] = path
    split = load_checkpoint(run_dir / "split.maud") if (run_dir / "split.maud").exists() else {}
    return RunArtifacts(
        config=TrainConfig.from_dict(report["config"]),
        best_epoch=int(report["best_epoch"]),
        best_weights=load_checkpoint(run_dir / "best.maud"),
        history=history,
        checkpoints=checkpoints,
        canary_indices=list(report.get("canary_indices", [])),
        train_indices=split.get("train_indices", np.zeros(0, dtype=np.int64)),
        val_indices=split.get("val_indices", np.zeros(0, dtype=np.int64)),
        started=report.get("started", ""),
        finished=report.get("finished", ""),
        wall_clock=float(report.get("wall_clock_seconds", 0.0)),
        weights_hash=report.get("weights_hash", ""),
        run_dir=run_dir,
    )


# ------------------------------
# Run matrix
# ------------------------------

_WORKER_DATA: Optional[Dataset] = None


def _init_worker(data: Dataset) -> None:
    global _WORKER_DATA
    _WORKER_DATA = data
    logging.getLogger().setLevel(logging.WARNING)


def _run_cell(config: TrainConfig, run_dir: Optional[Path]) -> RunArtifacts:
    return train(config, _WORKER_DATA, run_dir=run_dir)


def matrix_configs(base: TrainConfig, canary_ids: Sequence[Optional[int]], seeds: Sequence[int]) -> list[TrainConfig]:
    """One config per (canary, seed) cell, canary-major."""
    configs = []
    for cid in canary_ids:
        canary = CanarySpec(
            indices=[] if cid is None else [int(cid)],
            letter=base.canary.letter,
            size=base.canary.size,
            offset=base.canary.offset,
        )
        for seed in seeds:
            configs.append(base.replace(seed=int(seed), canary=canary))
    return configs


def run_matrix(
    base_config: TrainConfig,
    data: Dataset,
    canary_ids: Sequence[Optional[int]],
    seeds: Sequence[int],
    workers: int = 1,
    out_dir: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> list[RunArtifacts]:
    """Train every (canary, seed) cell independently; results come back in cell order."""
    configs = matrix_configs(base_config, canary_ids, seeds)
    for cfg in configs:
        bad = [i for i in cfg.canary.indices if not 0 <= i < len(data)]
        if bad:
            raise DataError(f"canary index {bad[0]} out of range [0, {len(data)})")
    run_dirs = [Path(out_dir) / run_name(cfg) if out_dir is not None else None for cfg in configs]
    return train_configs(configs, data, run_dirs, workers=workers, progress=progress)


def train_configs(
    configs: Sequence[TrainConfig],
    data: Dataset,
    run_dirs: Sequence[Optional[Path]],
    workers: int = 1,
    progress: bool = False,
) -> list[RunArtifacts]:
    """Train prepared cells, serially or on a process pool; order follows `configs`."""
    if len(configs) != len(run_dirs):
        raise ConfigError(f"{len(configs)} configs for {len(run_dirs)} run directories")
    if workers <= 1:
        return [
            train(cfg, data, run_dir=rd, progress=progress)
            for cfg, rd in zip(configs, run_dirs)
        ]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(data,)) as pool:
        return list(pool.map(_run_cell, configs, run_dirs))
