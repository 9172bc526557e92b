"""
Scanner: Walks an experiment directory and collects runs and audit results.

Contract: cli v1.0.0
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .manifest import MANIFEST_FILENAME, load_manifest

AUDIT_FILENAME = "audit.json"
WHITEBOX_FILENAME = "whitebox.json"
SKIP_DIRS = {"checkpoints", "__pycache__"}


@dataclass
class ScanResult:
    """Output schema for scan()."""
    runs: list[str] = field(default_factory=list)
    audits: list[str] = field(default_factory=list)
    whitebox: list[str] = field(default_factory=list)
    incomplete: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _readable_json(path: Path) -> bool:
    try:
        with open(path, "r", encoding="utf-8") as f:
            json.load(f)
        return True
    except (OSError, json.JSONDecodeError):
        return False


def scan(experiment_dir: str) -> dict:
    """
    Find run directories (those holding a manifest) and their audit files.

    Paths are relative to experiment_dir, posix style, sorted.

    Returns:
        ScanResult as dict with keys: runs, audits, whitebox, incomplete, warnings
    """
    root = Path(experiment_dir).resolve()
    if not root.exists():
        return ScanResult(warnings=[f"Experiment directory does not exist: {experiment_dir}"]).__dict__
    if not root.is_dir():
        return ScanResult(warnings=[f"Experiment path is not a directory: {experiment_dir}"]).__dict__

    result = ScanResult()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if not d.startswith(".") and d not in SKIP_DIRS)
        here = Path(dirpath)
        rel = here.relative_to(root).as_posix()
        rel = "" if rel == "." else rel

        if MANIFEST_FILENAME in filenames:
            manifest = load_manifest(here)
            if manifest is None:
                result.warnings.append(f"unreadable manifest in {rel or '.'}")
            elif manifest.status != "completed":
                result.incomplete.append(rel)
            else:
                result.runs.append(rel)

        for name, bucket in ((AUDIT_FILENAME, result.audits), (WHITEBOX_FILENAME, result.whitebox)):
            if name in filenames:
                path = here / name
                rel_path = f"{rel}/{name}" if rel else name
                if _readable_json(path):
                    bucket.append(rel_path)
                else:
                    result.warnings.append(f"unreadable audit file {rel_path}")

    result.runs.sort()
    result.audits.sort()
    result.whitebox.sort()
    result.incomplete.sort()
    return result.__dict__
