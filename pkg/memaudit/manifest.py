"""
Manifest: Run manifests with config hashing and staleness checks.

Contract: cli v1.0.0
"""

import json
import shutil
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from . import TOOL_VERSION
from .store import atomic_write_json, hash_file, hash_json, short_hash

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_FILENAME = "manifest.json"
CONFIG_FILENAME = "config.yaml"
CELL_FILENAME = "cell.json"


@dataclass
class ExperimentManifest:
    """Persisted record of one run: which config produced it and whether it finished."""
    schema_version: int
    tool_version: str
    experiment: str
    config_path: str
    config_hash: str
    output_dir: str
    created: str
    completed: Optional[str] = None
    status: str = "running"
    seed: Optional[int] = None
    canary_id: Optional[str] = None

    @property
    def short_hash(self) -> str:
        return short_hash(self.config_hash)

    def matches(self, config_hash: str, tool_version: str) -> tuple[bool, Optional[str]]:
        """Check if this run is current. Returns (matches, staleness_reason)."""
        if self.status != "completed":
            return False, "incomplete"
        if self.config_hash != config_hash:
            return False, "config_changed"
        if self.tool_version != tool_version:
            return False, "tool_changed"
        return True, None

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "tool_version": self.tool_version,
            "experiment": self.experiment,
            "config_path": self.config_path,
            "config_hash": self.config_hash,
            "output_dir": self.output_dir,
            "created": self.created,
            "completed": self.completed,
            "status": self.status,
            "seed": self.seed,
            "canary_id": self.canary_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentManifest":
        return cls(
            schema_version=data.get("schema_version", 1),
            tool_version=data.get("tool_version", ""),
            experiment=data.get("experiment", ""),
            config_path=data.get("config_path", ""),
            config_hash=data.get("config_hash", ""),
            output_dir=data.get("output_dir", ""),
            created=data.get("created", ""),
            completed=data.get("completed"),
            status=data.get("status", "running"),
            seed=data.get("seed"),
            canary_id=data.get("canary_id"),
        )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def copy_config(config_path: Path, run_dir: Path) -> tuple[Path, str]:
    """Copy the exact config file into the run directory; returns (copy, sha256)."""
    run_dir.mkdir(parents=True, exist_ok=True)
    target = run_dir / CONFIG_FILENAME
    if Path(config_path).resolve() != target.resolve():
        shutil.copyfile(config_path, target)
    return target, hash_file(target)


def config_hash(config_path: Path, cell: Optional[dict] = None) -> str:
    """Hash of the resolved cell config when given, else of the whole config file."""
    return hash_json(cell) if cell is not None else hash_file(config_path)


def start_manifest(
    run_dir: Path,
    experiment: str,
    config_path: Path,
    seed: Optional[int] = None,
    canary_id: Optional[str] = None,
    cell: Optional[dict] = None,
) -> ExperimentManifest:
    """Copy the config (and the resolved cell, if given) and write a 'running' manifest."""
    copy_config(config_path, run_dir)
    if cell is not None:
        atomic_write_json(run_dir / CELL_FILENAME, cell)
    manifest = ExperimentManifest(
        schema_version=MANIFEST_SCHEMA_VERSION,
        tool_version=TOOL_VERSION,
        experiment=experiment,
        config_path=str(config_path),
        config_hash=config_hash(config_path, cell),
        output_dir=str(run_dir),
        created=_now(),
        seed=seed,
        canary_id=canary_id,
    )
    save_manifest(run_dir, manifest)
    return manifest


def complete_manifest(run_dir: Path, manifest: ExperimentManifest) -> ExperimentManifest:
    manifest.status = "completed"
    manifest.completed = _now()
    save_manifest(run_dir, manifest)
    return manifest


def save_manifest(run_dir: Path, manifest: ExperimentManifest) -> None:
    atomic_write_json(run_dir / MANIFEST_FILENAME, manifest.to_dict())


def load_manifest(run_dir: Path) -> Optional[ExperimentManifest]:
    """Load a run manifest, if present; corrupt files count as absent."""
    manifest_path = run_dir / MANIFEST_FILENAME
    if not manifest_path.exists():
        return None
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return ExperimentManifest.from_dict(data)
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError):
        return None


def check_status(
    run_dir: Path,
    config_path: Path,
    tool_version: str = TOOL_VERSION,
    cell: Optional[dict] = None,
) -> dict:
    """
    Whether the run in run_dir is up to date for config_path.

    With cell, only that run's resolved config counts: edits to other cells
    or to audit-only sections of the file leave it current.

    Returns dict with is_stale and staleness_reason
    (not_run | incomplete | config_changed | tool_changed).
    """
    manifest = load_manifest(run_dir)
    if manifest is None:
        return {"is_stale": True, "staleness_reason": "not_run"}
    matches, reason = manifest.matches(config_hash(config_path, cell), tool_version)
    return {"is_stale": not matches, "staleness_reason": reason}
