"""
Config: YAML experiment configuration.

Contract: trainer v1.0.0
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .canary import PATCH_OFFSET, PATCH_SIZE, Patch, render_glyph
from .data import DATASETS, SHAPES
from .errors import ConfigError
from .nn import ARCHITECTURES, INPUT_SHAPES
from .score import TESTS as AUDIT_TESTS

SECTIONS = (
    "experiment", "data", "model", "training", "regularisers",
    "canary", "seeds", "audit", "influence", "analysis",
)
CHECKPOINT_POLICIES = ("every_epoch", "selected")
DEFAULT_BATCH = {"MLP-1": 128, "CNN-1": 128, "CNN-2": 512}


def _num(value: Any, kind, key: str):
    # YAML reads "3e-4" as a string
    try:
        return kind(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from e


@dataclass
class CanarySpec:
    """Where the unique feature goes and what it looks like."""
    indices: list[int] = field(default_factory=list)
    letter: str = "A"
    size: int = PATCH_SIZE
    offset: tuple[int, int] = PATCH_OFFSET

    def __post_init__(self):
        if isinstance(self.indices, int):
            self.indices = [self.indices]
        self.indices = [int(i) for i in self.indices]
        self.offset = tuple(int(v) for v in self.offset)
        if self.size != PATCH_SIZE:
            raise ConfigError(f"canary size must be {PATCH_SIZE} (built-in font)")

    @property
    def canary_id(self) -> Optional[int]:
        return self.indices[0] if self.indices else None

    @property
    def key(self) -> str:
        if not self.indices:
            return "none"
        if len(self.indices) == 1:
            return str(self.indices[0])
        return f"{self.indices[0]}x{len(self.indices)}"

    def patch(self) -> Patch:
        return render_glyph(self.letter, offset=self.offset)

    def to_dict(self) -> dict:
        return {"indices": list(self.indices), "letter": self.letter, "size": self.size, "offset": list(self.offset)}

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "CanarySpec":
        data = dict(data or {})
        if "index" in data:
            data.setdefault("indices", data.pop("index"))
        indices = data.get("indices") or []
        return cls(
            indices=indices if isinstance(indices, list) else [indices],
            letter=str(data.get("letter", "A")),
            size=_num(data.get("size", PATCH_SIZE), int, "canary.size"),
            offset=tuple(data.get("offset", PATCH_OFFSET)),
        )


@dataclass
class TrainConfig:
    architecture: str = "MLP-1"
    dataset: str = "mnist"
    learning_rate: float = 3e-4
    batch_size: int = 128
    max_epochs: int = 500
    patience: int = 10
    seed: int = 0
    dropout: bool = False
    batchnorm: bool = False
    augmentation: bool = False
    canary: CanarySpec = field(default_factory=CanarySpec)
    validation_fraction: float = 0.1
    checkpoint_policy: str = "every_epoch"
    num_classes: int = 10
    checkpoints_k: int = 10

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture: {self.architecture}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset: {self.dataset}")
        if INPUT_SHAPES[self.architecture] != SHAPES[self.dataset]:
            raise ConfigError(f"{self.architecture} does not take {self.dataset} images")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError(f"validation fraction must be in (0, 1), got {self.validation_fraction}")
        if self.checkpoint_policy not in CHECKPOINT_POLICIES:
            raise ConfigError(f"unknown checkpoint policy: {self.checkpoint_policy}")

    @classmethod
    def for_architecture(cls, architecture: str, **overrides) -> "TrainConfig":
        """Per-architecture defaults (batch 512 and selected checkpoints for CNN-2)."""
        dataset = "cifar10" if architecture == "CNN-2" else "mnist"
        base = {
            "architecture": architecture,
            "dataset": dataset,
            "batch_size": DEFAULT_BATCH.get(architecture, 128),
            "checkpoint_policy": "selected" if architecture == "CNN-2" else "every_epoch",
        }
        base.update(overrides)
        return cls(**base)

    @property
    def regularisers(self) -> frozenset[str]:
        """Model-level regularisers (augmentation acts on data, not layers)."""
        regs = set()
        if self.dropout:
            regs.add("dropout")
        if self.batchnorm:
            regs.add("batchnorm")
        return frozenset(regs)

    @property
    def regulariser_label(self) -> str:
        parts = [name for name, on in (("dropout", self.dropout), ("batchnorm", self.batchnorm), ("augmentation", self.augmentation)) if on]
        return "+".join(parts) or "none"

    def replace(self, **changes) -> "TrainConfig":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return TrainConfig(**data)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["canary"] = self.canary.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        if "canary" in data and not isinstance(data["canary"], CanarySpec):
            data["canary"] = CanarySpec.from_dict(data["canary"])
        for key, kind in (("learning_rate", float), ("validation_fraction", float)):
            if key in data:
                data[key] = _num(data[key], kind, key)
        for key in ("batch_size", "max_epochs", "patience", "seed", "num_classes", "checkpoints_k"):
            if key in data:
                data[key] = _num(data[key], int, key)
        for key in ("dropout", "batchnorm", "augmentation"):
            if key in data:
                data[key] = bool(data[key])
        return cls(**data)


@dataclass
class DataConfig:
    dataset: str = "mnist"
    root: Optional[str] = None
    subset: Optional[int] = None
    ood_source: Optional[str] = None
    ood_n: int = 2000


@dataclass
class AuditConfig:
    n: int = 2000
    seed: int = 0
    test: str = "reference"
    references: int = 20
    matched: bool = True
    white_box: bool = False
    evaluations: int = 3

    def __post_init__(self):
        if self.test not in AUDIT_TESTS:
            raise ConfigError(f"audit.test must be one of {list(AUDIT_TESTS)}, got {self.test!r}")
        if self.references < 2:
            raise ConfigError(f"audit.references must be >= 2, got {self.references}")
        if self.evaluations < 1:
            raise ConfigError(f"audit.evaluations must be >= 1, got {self.evaluations}")


@dataclass
class InfluenceConfig:
    k: int = 15
    checkpoints: int = 10
    batch_size: int = 256


@dataclass
class AnalysisConfig:
    models: int = 20
    evaluations: int = 3


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    canary_ids: list[int] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0])
    audit: AuditConfig = field(default_factory=AuditConfig)
    influence: InfluenceConfig = field(default_factory=InfluenceConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self) -> dict:
        t = self.training.to_dict()
        return {
            "experiment": {"name": self.name},
            "data": asdict(self.data),
            "model": {"architecture": t.pop("architecture"), "num_classes": t.pop("num_classes")},
            "regularisers": {k: t.pop(k) for k in ("dropout", "batchnorm", "augmentation")},
            "canary": {**t.pop("canary"), "ids": list(self.canary_ids)},
            "seeds": list(self.seeds),
            "training": {k: v for k, v in t.items() if k not in ("dataset", "seed")},
            "audit": asdict(self.audit),
            "influence": asdict(self.influence),
            "analysis": asdict(self.analysis),
        }

    @classmethod
    def from_dict(cls, raw: Optional[dict]) -> "ExperimentConfig":
        raw = dict(raw or {})
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")

        experiment = raw.get("experiment") or {}
        data = _section(DataConfig, raw.get("data"), "data")
        model = dict(raw.get("model") or {})
        regs = dict(raw.get("regularisers") or {})
        canary = dict(raw.get("canary") or {})
        seeds = raw.get("seeds", [0])
        if isinstance(seeds, dict):
            seeds = seeds.get("values", [0])
        if isinstance(seeds, int):
            seeds = [seeds]

        ids = canary.pop("ids", None)
        if ids is None:
            ids = canary.get("indices", canary.get("index", []))
        ids = [ids] if isinstance(ids, int) else list(ids)

        architecture = model.get("architecture", "MLP-1")
        train_raw = {
            **_training_defaults(architecture),
            **dict(raw.get("training") or {}),
            "architecture": architecture,
            "dataset": data.dataset,
            "seed": int(seeds[0]) if seeds else 0,
        }
        if "num_classes" in model:
            train_raw["num_classes"] = model["num_classes"]
        for key in ("dropout", "batchnorm", "augmentation"):
            if key in regs:
                train_raw[key] = regs.pop(key)
        if regs:
            raise ConfigError(f"unknown regularisers: {sorted(regs)}")
        canary.pop("index", None)
        canary["indices"] = ids[:1]
        train_raw["canary"] = CanarySpec.from_dict(canary)

        return cls(
            name=str(experiment.get("name", "experiment")),
            data=data,
            training=TrainConfig.from_dict(train_raw),
            canary_ids=[int(i) for i in ids],
            seeds=[int(s) for s in seeds],
            audit=_section(AuditConfig, raw.get("audit"), "audit"),
            influence=_section(InfluenceConfig, raw.get("influence"), "influence"),
            analysis=_section(AnalysisConfig, raw.get("analysis"), "analysis"),
        )


def _training_defaults(architecture: str) -> dict:
    return {
        "batch_size": DEFAULT_BATCH.get(architecture, 128),
        "checkpoint_policy": "selected" if architecture == "CNN-2" else "every_epoch",
    }


def _section(kind, data: Optional[dict], name: str):
    data = dict(data or {})
    spec = {f.name: f for f in fields(kind)}
    unknown = set(data) - set(spec)
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    values = {}
    for key, value in data.items():
        default = getattr(kind(), key)
        if isinstance(default, bool):
            values[key] = bool(value)
        elif isinstance(default, int) and value is not None:
            values[key] = _num(value, int, f"{name}.{key}")
        elif isinstance(default, float) and value is not None:
            values[key] = _num(value, float, f"{name}.{key}")
        else:
            values[key] = value
    return kind(**values)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(raw)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
