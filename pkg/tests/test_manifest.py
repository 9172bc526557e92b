"""
Test runner for run manifests (cli contract).
Validates implementation against contracts/cli.yaml assertions.
"""

import json
import sys
import tempfile
from pathlib import Path

# Add package to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from memaudit.manifest import (
    CELL_FILENAME, CONFIG_FILENAME, MANIFEST_FILENAME, ExperimentManifest, check_status,
    complete_manifest, load_manifest, start_manifest,
)


def assert_eq(actual, expected, context: str):
    if actual != expected:
        raise AssertionError(f"{context}: expected {expected!r}, got {actual!r}")


def _config(tmpdir: str, text: str = "experiment:\n  name: toy\n") -> Path:
    path = Path(tmpdir) / "toy.yaml"
    path.write_text(text)
    return path


def test_T001_start_and_complete():
    """T001: a run starts 'running' with a copied config and ends 'completed'."""
    with tempfile.TemporaryDirectory() as tmpdir:
        config = _config(tmpdir)
        run_dir = Path(tmpdir) / "runs" / "a"
        manifest = start_manifest(run_dir, "toy", config, seed=3, canary_id="12")

        assert_eq((run_dir / CONFIG_FILENAME).read_text(), config.read_text(), "T001 config copied")
        assert_eq(load_manifest(run_dir).status, "running", "T001 running")
        assert_eq(len(manifest.short_hash), 16, "T001 short hash")

        complete_manifest(run_dir, manifest)
        loaded = load_manifest(run_dir)
        assert_eq((loaded.status, loaded.seed, loaded.canary_id), ("completed", 3, "12"), "T001 completed")
        if loaded.completed is None:
            raise AssertionError("T001: completion time missing")

    print("✓ T001 start_and_complete")


def test_T002_staleness_reasons():
    """T002: not_run, incomplete, config_changed and tool_changed are reported."""
    with tempfile.TemporaryDirectory() as tmpdir:
        config = _config(tmpdir)
        run_dir = Path(tmpdir) / "run"
        assert_eq(check_status(run_dir, config), {"is_stale": True, "staleness_reason": "not_run"}, "T002 not run")

        manifest = start_manifest(run_dir, "toy", config)
        assert_eq(check_status(run_dir, config)["staleness_reason"], "incomplete", "T002 incomplete")

        complete_manifest(run_dir, manifest)
        assert_eq(check_status(run_dir, config), {"is_stale": False, "staleness_reason": None}, "T002 current")
        assert_eq(check_status(run_dir, config, tool_version="9.9.9")["staleness_reason"], "tool_changed", "T002 tool")

        config.write_text("experiment:\n  name: changed\n")
        assert_eq(check_status(run_dir, config)["staleness_reason"], "config_changed", "T002 config")

    print("✓ T002 staleness_reasons")


def test_T003_corrupt_manifest():
    """T003: an unreadable manifest counts as absent."""
    with tempfile.TemporaryDirectory() as tmpdir:
        run_dir = Path(tmpdir)
        (run_dir / MANIFEST_FILENAME).write_text("{not json")
        assert_eq(load_manifest(run_dir), None, "T003 corrupt")
        assert_eq(load_manifest(run_dir / "nowhere"), None, "T003 missing")

    print("✓ T003 corrupt_manifest")


def test_T004_dict_round_trip():
    """T004: to_dict/from_dict keep every field; missing keys take defaults."""
    manifest = ExperimentManifest(
        schema_version=1, tool_version="0.1.0", experiment="toy", config_path="toy.yaml",
        config_hash="ab" * 32, output_dir="runs/a", created="2024-01-01T00:00:00+00:00",
        seed=1, canary_id="none",
    )
    again = ExperimentManifest.from_dict(json.loads(json.dumps(manifest.to_dict())))
    assert_eq(again, manifest, "T004 round trip")
    assert_eq(ExperimentManifest.from_dict({}).status, "running", "T004 defaults")

    print("✓ T004 dict_round_trip")


def test_T005_cell_config_hash():
    """T005: with a resolved cell config, only that cell's settings decide staleness."""
    with tempfile.TemporaryDirectory() as tmpdir:
        config = _config(tmpdir)
        run_dir = Path(tmpdir) / "run"
        cell = {"training": {"seed": 0, "batch_size": 16, "canary": {"indices": [3]}}, "data": {"subset": 40}}
        complete_manifest(run_dir, start_manifest(run_dir, "toy", config, cell=cell))
        assert_eq(json.loads((run_dir / CELL_FILENAME).read_text()), cell, "T005 cell stored")

        config.write_text("experiment:\n  name: toy\nseeds: [0, 1]\naudit:\n  seed: 9\n")
        reordered = {"data": {"subset": 40}, "training": {"canary": {"indices": [3]}, "batch_size": 16, "seed": 0}}
        assert_eq(check_status(run_dir, config, cell=reordered)["is_stale"], False, "T005 file edits ignored")

        changed = {**cell, "training": {**cell["training"], "batch_size": 32}}
        assert_eq(check_status(run_dir, config, cell=changed)["staleness_reason"], "config_changed", "T005 cell change")

    print("✓ T005 cell_config_hash")


def main_tests():
    print("=" * 60)
    print("Manifest Contract Tests")
    print("=" * 60)

    tests = [
        test_T001_start_and_complete,
        test_T002_staleness_reasons,
        test_T003_corrupt_manifest,
        test_T004_dict_round_trip,
        test_T005_cell_config_hash,
    ]

    passed = 0
    failed = 0

    for test in tests:
        try:
            test()
            passed += 1
        except AssertionError as e:
            print(f"✗ {test.__name__}: {e}")
            failed += 1
        except Exception as e:
            print(f"✗ {test.__name__}: unexpected error: {e}")
            import traceback
            traceback.print_exc()
            failed += 1

    print("=" * 60)
    print(f"Results: {passed} passed, {failed} failed")
    print("=" * 60)

    return 0 if failed == 0 else 1


if __name__ == "__main__":
    sys.exit(main_tests())
