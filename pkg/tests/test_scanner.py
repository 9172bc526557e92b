"""
Test runner for the experiment scanner (cli contract).
Validates implementation against contracts/cli.yaml assertions.
"""

import sys
import tempfile
from pathlib import Path

# Add package to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from memaudit.manifest import complete_manifest, start_manifest
from memaudit.scanner import scan


def assert_eq(actual, expected, context: str):
    if actual != expected:
        raise AssertionError(f"{context}: expected {expected!r}, got {actual!r}")


def _experiment(root: Path) -> None:
    config = root / "toy.yaml"
    config.write_text("experiment:\n  name: toy\n")
    for name, done in (("runs/b", True), ("runs/a", True), ("runs/c", False)):
        manifest = start_manifest(root / name, "toy", config)
        if done:
            complete_manifest(root / name, manifest)
    (root / "runs/a/audit.json").write_text('{"M": 0.1}')
    (root / "runs/a/whitebox.json").write_text('{"M_w": 0.2}')
    (root / "runs/b/audit.json").write_text("{truncated")
    (root / "runs/a/checkpoints").mkdir()
    (root / "runs/a/checkpoints/audit.json").write_text("{}")


def test_T001_finds_runs_and_audits():
    """T001: completed runs, audits and white-box files are listed relative and sorted."""
    with tempfile.TemporaryDirectory() as tmpdir:
        root = Path(tmpdir)
        _experiment(root)
        result = scan(tmpdir)
        assert_eq(result["runs"], ["runs/a", "runs/b"], "T001 runs")
        assert_eq(result["incomplete"], ["runs/c"], "T001 incomplete")
        assert_eq(result["audits"], ["runs/a/audit.json"], "T001 audits")
        assert_eq(result["whitebox"], ["runs/a/whitebox.json"], "T001 whitebox")

    print("✓ T001 finds_runs_and_audits")


def test_T002_unreadable_files_warn():
    """T002: corrupt audit files are skipped with a warning."""
    with tempfile.TemporaryDirectory() as tmpdir:
        _experiment(Path(tmpdir))
        warnings = scan(tmpdir)["warnings"]
        assert_eq(warnings, ["unreadable audit file runs/b/audit.json"], "T002 warnings")

    print("✓ T002 unreadable_files_warn")


def test_T003_missing_directory():
    """T003: a missing or non-directory path yields an empty scan with one warning."""
    with tempfile.TemporaryDirectory() as tmpdir:
        missing = scan(str(Path(tmpdir) / "nope"))
        assert_eq(missing["runs"], [], "T003 runs")
        assert_eq(len(missing["warnings"]), 1, "T003 warning")

        file_path = Path(tmpdir) / "file.txt"
        file_path.write_text("x")
        assert_eq(scan(str(file_path))["warnings"][0].startswith("Experiment path is not a directory"), True, "T003 file")

    print("✓ T003 missing_directory")


def main_tests():
    print("=" * 60)
    print("Scanner Contract Tests")
    print("=" * 60)

    tests = [
        test_T001_finds_runs_and_audits,
        test_T002_unreadable_files_warn,
        test_T003_missing_directory,
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
