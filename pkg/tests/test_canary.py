"""
Test runner for canary contract.
Validates implementation against contracts/canary.yaml assertions.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

# Add package to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from memaudit.canary import (
    FONT_5X5, ProbeTriple, build_canary_dataset, build_probe_triple, control_patches, inject,
    pick_class_indices, random_patch_seeds, random_patches, render_glyph, sample_random_patch,
)
from memaudit.data import Dataset
from memaudit.errors import ConfigError, DataError, ShapeError


def assert_eq(actual, expected, context: str):
    if actual != expected:
        raise AssertionError(f"{context}: expected {expected!r}, got {actual!r}")


def assert_raises(exc, fn, context: str):
    try:
        fn()
    except exc:
        return
    raise AssertionError(f"{context}: expected {exc.__name__}")


def assert_array_eq(actual, expected, context: str):
    if not np.array_equal(actual, expected):
        raise AssertionError(f"{context}: arrays differ")


def _dataset(n=12, shape=(28, 28, 1), seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.random((n,) + shape), np.arange(n) % 3, "toy")


def test_T001_glyph_rendering():
    """T001: 'A' renders as the 5x5 font bitmap; lower case is accepted; digits are not."""
    patch = render_glyph("A")
    assert_eq(patch.pixels[0].tolist(), [0.0, 1.0, 1.0, 1.0, 0.0], "T001 top row")
    assert_eq(patch.pixels[2].tolist(), [1.0] * 5, "T001 crossbar")
    assert_eq((patch.size, patch.offset, patch.kind, patch.glyph), (5, (1, 1), "unique", "A"), "T001 meta")
    assert_array_eq(render_glyph("a").pixels, patch.pixels, "T001 case")
    assert_eq(len(FONT_5X5), 26, "T001 font size")
    assert_raises(ConfigError, lambda: render_glyph("7"), "T001 digit")

    print("✓ T001 glyph_rendering")


def test_T002_inject_region():
    """T002: injection overwrites rows/cols 1..5 on every channel and nothing else."""
    image = np.full((32, 32, 3), 0.5, dtype=np.float32)
    patch = render_glyph("H")
    out = inject(image, patch)

    for c in range(3):
        assert_array_eq(out[1:6, 1:6, c], patch.pixels, f"T002 channel {c}")
    mask = np.ones((32, 32), dtype=bool)
    mask[1:6, 1:6] = False
    assert_eq(bool(np.all(out[mask] == 0.5)), True, "T002 rest untouched")
    assert_eq(bool(np.all(image == 0.5)), True, "T002 input not mutated")

    print("✓ T002 inject_region")


def test_T003_random_patch_seeded():
    """T003: random patches are U[0,1], reproducible per seed and distinct across seeds."""
    a = sample_random_patch(3)
    b = sample_random_patch(3)
    c = sample_random_patch(4)
    assert_array_eq(a.pixels, b.pixels, "T003 same seed")
    if np.array_equal(a.pixels, c.pixels):
        raise AssertionError("T003: different seeds gave the same patch")
    assert_eq((a.kind, a.rng_seed), ("random", 3), "T003 meta")
    assert_eq(bool(a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0), True, "T003 range")

    print("✓ T003 random_patch_seeded")


def test_T004_canary_dataset():
    """T004: only the chosen images change; labels are kept; bad indices raise DataError."""
    train = _dataset()
    patch = render_glyph("A")
    canary = build_canary_dataset(train, 4, patch)

    assert_array_eq(canary.images[4], inject(train.images[4], patch), "T004 injected")
    others = [i for i in range(len(train)) if i != 4]
    assert_array_eq(canary.images[others], train.images[others], "T004 others")
    assert_array_eq(canary.labels, train.labels, "T004 labels")

    multi = build_canary_dataset(train, [1, 2, 3], patch)
    assert_array_eq(multi.images[1:4, 1:6, 1:6, 0], np.stack([patch.pixels] * 3), "T004 multiple")

    assert_raises(DataError, lambda: build_canary_dataset(train, 12, patch), "T004 range")
    assert_raises(DataError, lambda: build_canary_dataset(train, [], patch), "T004 empty")

    print("✓ T004 canary_dataset")


def test_T005_pick_class_indices():
    """T005: k distinct indices of one class, sorted and seeded."""
    train = _dataset(n=30)
    picked = pick_class_indices(train, 2, 5, seed=1)
    assert_eq(len(set(picked.tolist())), 5, "T005 distinct")
    assert_eq(bool(np.all(train.labels[picked] == 2)), True, "T005 class")
    assert_array_eq(picked, np.sort(picked), "T005 sorted")
    assert_array_eq(pick_class_indices(train, 2, 5, seed=1), picked, "T005 seeded")
    assert_raises(DataError, lambda: pick_class_indices(train, 2, 11, seed=1), "T005 too many")

    print("✓ T005 pick_class_indices")


def test_T006_probe_triple():
    """T006: D_u carries z_u everywhere, D_r a fresh control patch per image, D_c stays clean."""
    ood = Dataset(np.random.default_rng(2).random((6, 28, 28, 1)), None, "ood", "ood")
    z_u = render_glyph("Q")
    triple = build_probe_triple(ood, z_u, seed=5)

    assert_eq(len(triple), 6, "T006 size")
    assert_array_eq(triple.d_c, ood.images, "T006 clean")
    for i in range(6):
        assert_array_eq(triple.d_u[i, 1:6, 1:6, 0], z_u.pixels, f"T006 unique {i}")
    if np.array_equal(triple.d_r[0, 1:6, 1:6], triple.d_r[1, 1:6, 1:6]):
        raise AssertionError("T006: random patches repeat across images")

    again = build_probe_triple(ood, z_u, seed=5)
    assert_array_eq(again.d_r, triple.d_r, "T006 seeded")

    with tempfile.TemporaryDirectory() as tmpdir:
        path = triple.save(Path(tmpdir) / "probe.maud")
        loaded = ProbeTriple.load(path, glyph="Q")
        assert_array_eq(loaded.d_r, triple.d_r, "T006 saved D_r")
        assert_array_eq(loaded.z_u.pixels, z_u.pixels, "T006 saved z_u")
        assert_array_eq(loaded.r_seeds, triple.r_seeds, "T006 saved seeds")
        assert_eq((loaded.seed, loaded.matched), (5, True), "T006 saved reference stream")

    print("✓ T006 probe_triple")


def test_T007_patch_must_fit():
    """T007: a patch that runs off the image raises ShapeError."""
    patch = render_glyph("A", offset=(25, 25))
    assert_raises(ShapeError, lambda: inject(np.zeros((28, 28, 1)), patch), "T007")

    print("✓ T007 patch_must_fit")


def test_T008_random_patch_distribution():
    """T008: uniform patches average 0.5 over 10^5 pixels; matched patches shuffle z_u's own pixels."""
    patches = random_patches(random_patch_seeds(21, 4000))
    pixels = np.concatenate([p.pixels.ravel() for p in patches]).astype(np.float64)
    assert_eq(pixels.size, 100_000, "T008 draws")
    if abs(pixels.mean() - 0.5) > 0.005:
        raise AssertionError(f"T008: mean {pixels.mean():.4f} not within 0.005 of 0.5")
    if abs(pixels.var() - 1.0 / 12.0) > 0.002:
        raise AssertionError(f"T008: variance {pixels.var():.4f} not near 1/12")

    z_u = render_glyph("K", offset=(2, 3))
    matched = control_patches(z_u, random_patch_seeds(22, 50))
    assert_eq({p.offset for p in matched}, {(2, 3)}, "T008 matched offset")
    assert_eq(all(np.array_equal(np.sort(p.pixels.ravel()), np.sort(z_u.pixels.ravel())) for p in matched),
              True, "T008 same pixel values")
    moved = sum(not np.array_equal(p.pixels, z_u.pixels) for p in matched)
    assert_eq(moved, 50, "T008 rearranged")
    uniform = control_patches(z_u, random_patch_seeds(22, 3), matched=False)
    assert_eq(bool(len(np.unique(uniform[0].pixels)) > 2), True, "T008 uniform control")

    print("✓ T008 random_patch_distribution")


def main_tests():
    print("=" * 60)
    print("Canary Contract Tests")
    print("=" * 60)

    tests = [
        test_T001_glyph_rendering,
        test_T002_inject_region,
        test_T003_random_patch_seeded,
        test_T004_canary_dataset,
        test_T005_pick_class_indices,
        test_T006_probe_triple,
        test_T007_patch_must_fit,
        test_T008_random_patch_distribution,
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
