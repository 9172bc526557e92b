"""
Test runner for score contract.
Validates implementation against contracts/score.yaml assertions.
"""

import math
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

# Add package to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from memaudit.canary import ProbeTriple, build_probe_triple, render_glyph
from memaudit.data import Dataset
from memaudit.errors import ConfigError, DataError, ShapeError
from memaudit.nn import Dense, Flatten, Model, Softmax, build_model
from memaudit.score import (
    append_results_csv, kl_divergence, kl_rows, load_result_json, m_score,
    m_score_spread, mw_score, mw_score_spread, one_tailed_t_test, reference_test,
    write_result_json,
)

KEY_COLUMNS = ["canary_id", "dataset", "model", "regulariser", "seed"]


def assert_eq(actual, expected, context: str):
    if actual != expected:
        raise AssertionError(f"{context}: expected {expected!r}, got {actual!r}")


def assert_close(actual, expected, context: str, tol: float = 1e-6):
    if not math.isclose(actual, expected, rel_tol=tol, abs_tol=tol):
        raise AssertionError(f"{context}: expected {expected!r}, got {actual!r}")


def assert_raises(exc, fn, context: str):
    try:
        fn()
    except exc:
        return
    raise AssertionError(f"{context}: expected {exc.__name__}")


def _linear_model(weights=None):
    """6x6 greyscale -> 3 classes, one dense layer, float64."""
    model = Model([Flatten(), Dense(3), Softmax()], (6, 6, 1), 3, seed=0, dtype=np.float64)
    if weights is not None:
        model.params["dense_0/kernel"].data[...] = weights
    return model


def _glyph_detector(letter="A"):
    """Class-0 logit = sum over the patch region of (glyph - 0.5) * pixel."""
    kernel = np.zeros((36, 3))
    glyph = render_glyph(letter).pixels
    for r in range(5):
        for c in range(5):
            kernel[(r + 1) * 6 + (c + 1), 0] = glyph[r, c] - 0.5
    return _linear_model(kernel)


def _blank_ood(n=20):
    return Dataset(np.zeros((n, 6, 6, 1)), None, "blank", "ood")


def test_T001_kl_divergence():
    """T001: KL([.5,.5] || [.25,.75]) matches the closed form; KL(p||p) = 0."""
    expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
    assert_close(kl_divergence([0.5, 0.5], [0.25, 0.75]), expected, "T001 value")
    assert_close(kl_divergence([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]), 0.0, "T001 self")

    rows = kl_rows(np.array([[1.0, 0.0], [0.5, 0.5]]), np.array([[0.5, 0.5], [0.5, 0.5]]))
    assert_close(float(rows[0]), math.log(2.0), "T001 zero entry clamped")
    assert_eq(bool(np.all(rows >= 0.0)), True, "T001 non-negative")

    assert_raises(DataError, lambda: kl_divergence([0.5, 0.6], [0.5, 0.5]), "T001 sum")
    assert_raises(DataError, lambda: kl_divergence([1.5, -0.5], [0.5, 0.5]), "T001 negative")
    assert_raises(ShapeError, lambda: kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5]), "T001 length")

    print("✓ T001 kl_divergence")


def test_T002_one_tailed_t_test():
    """T002: Welch example is significant and agrees with scipy's one-sided test."""
    x_u = [1.0, 1.1, 0.9, 1.2, 1.0]
    x_r = [0.1, 0.2, 0.15, 0.05, 0.1]
    t_stat, p_value = one_tailed_t_test(x_u, x_r)
    if not (t_stat > 0 and p_value < 0.001):
        raise AssertionError(f"T002: t={t_stat}, p={p_value}")

    ref = stats.ttest_ind(x_u, x_r, equal_var=False, alternative="greater")
    assert_close(t_stat, float(ref.statistic), "T002 welch t")
    assert_close(p_value, float(ref.pvalue), "T002 welch p", tol=1e-9)

    paired_t, paired_p = one_tailed_t_test(x_u, x_r, paired=True)
    ref = stats.ttest_rel(x_u, x_r, alternative="greater")
    assert_close(paired_t, float(ref.statistic), "T002 paired t")
    assert_close(paired_p, float(ref.pvalue), "T002 paired p", tol=1e-9)

    _, p_reversed = one_tailed_t_test(x_r, x_u)
    if p_reversed < 0.999:
        raise AssertionError(f"T002: reversed groups should give p near 1, got {p_reversed}")

    print("✓ T002 one_tailed_t_test")


def test_T003_degenerate_samples():
    """T003: zero variance with equal means gives (0, 0.5); fewer than two samples raise DataError."""
    assert_eq(one_tailed_t_test([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]), (0.0, 0.5), "T003 equal")
    t_stat, p_value = one_tailed_t_test([1.0, 1.0], [0.0, 0.0])
    assert_eq((t_stat, p_value), (math.inf, 0.0), "T003 separated")
    assert_raises(DataError, lambda: one_tailed_t_test([1.0], [0.0, 0.5]), "T003 n=1")
    assert_raises(ShapeError, lambda: one_tailed_t_test([1.0, 2.0], [0.0, 0.5, 1.0], paired=True), "T003 paired")

    print("✓ T003 degenerate_samples")


def test_T004_m_score_detects_glyph():
    """T004: a model keyed on the glyph gives M > 0 with p < 0.05."""
    model = _glyph_detector("A")
    triple = build_probe_triple(_blank_ood(), render_glyph("A"), seed=1)
    result = m_score(model, triple, metadata={"canary_id": 7, "dataset": "toy", "model": "linear", "seed": 0})

    assert_eq(result.n, 20, "T004 n")
    assert_close(result.m, float(result.x_u.mean() - result.x_r.mean()), "T004 M definition")
    if not (result.m > 0 and result.significant):
        raise AssertionError(f"T004: M={result.m}, p={result.p_value}")
    assert_eq((result.test, len(result.reference)), ("reference", 20), "T004 test")
    # z_u beats every reference pattern, the smallest p 20 references allow
    assert_close(result.p_value, 1.0 / 21.0, "T004 p")
    assert_eq(result.to_row()["canary_id"], 7, "T004 row metadata")
    assert_eq(result.to_row()["regulariser"], "none", "T004 default regulariser")

    paired = m_score(model, triple, test="paired")
    assert_eq(paired.test, "paired", "T004 paired label")
    assert_close(paired.m, result.m, "T004 M independent of the test")
    assert_eq(m_score(model, triple, test="welch").test, "welch", "T004 welch label")

    print("✓ T004 m_score_detects_glyph")


def test_T005_m_score_insensitive_model():
    """T005: a model that ignores its input scores M = 0 with p = 0.5."""
    model = _linear_model(np.zeros((36, 3)))
    triple = build_probe_triple(Dataset(np.random.default_rng(0).random((8, 6, 6, 1)), None), render_glyph("B"), 2)
    result = m_score(model, triple)
    assert_close(result.m, 0.0, "T005 M")
    assert_eq(result.p_value, 0.5, "T005 p")
    assert_eq(result.significant, False, "T005 significant")

    wrong = build_probe_triple(Dataset(np.zeros((4, 8, 8, 1)), None), render_glyph("B"), 2)
    assert_raises(ShapeError, lambda: m_score(model, wrong), "T005 input shape")
    assert_raises(ConfigError, lambda: m_score(model, triple, test="student"), "T005 unknown test")

    print("✓ T005 m_score_insensitive_model")


def test_T006_white_box_score():
    """T006: M_w is the mean log-ratio of P(y | unique) over P(y | random)."""
    model = _glyph_detector("A")
    d_y = Dataset(np.zeros((10, 6, 6, 1)), np.zeros(10, dtype=np.int64), "toy", num_classes=3)
    result = mw_score(model, d_y, render_glyph("A"), seed=3)

    assert_eq((result.n, result.label), (10, 0), "T006 meta")
    assert_close(result.m_w, result.mean_log_unique - result.mean_log_random, "T006 definition")
    if not (result.m_w > 0 and result.mean_p_unique > result.mean_p_random):
        raise AssertionError(f"T006: M_w={result.m_w}")
    if result.p_value is None or result.p_value >= 0.05:
        raise AssertionError(f"T006: expected a significant paired test, got {result.p_value}")
    assert_eq(sorted(result.to_dict())[:3], ["M_w", "label", "mean_log_random"], "T006 keys")

    mixed = Dataset(np.zeros((2, 6, 6, 1)), np.array([0, 1]), "toy", num_classes=3)
    assert_raises(DataError, lambda: mw_score(model, mixed, render_glyph("A"), 0), "T006 mixed labels")

    print("✓ T006 white_box_score")


def test_T007_spread_over_patch_draws():
    """T007: re-evaluating M with fresh random patches yields one value per seed."""
    model = _glyph_detector("A")
    spread = m_score_spread(model, _blank_ood(10), render_glyph("A"), seeds=[0, 1, 2])
    assert_eq(len(spread.values), 3, "T007 count")
    assert_close(spread.mean, float(np.mean(spread.values)), "T007 mean")
    assert_eq(bool(spread.range >= 0.0), True, "T007 range")

    print("✓ T007 spread_over_patch_draws")


def test_T008_result_files():
    """T008: audit.json round-trips; results.csv rows with the same key are replaced."""
    model = _glyph_detector("A")
    triple = build_probe_triple(_blank_ood(6), render_glyph("A"), seed=4)
    meta = {"canary_id": 3, "dataset": "toy", "model": "linear", "regulariser": "none", "seed": 0}
    result = m_score(model, triple, metadata=meta)

    with tempfile.TemporaryDirectory() as tmpdir:
        loaded = load_result_json(write_result_json(Path(tmpdir) / "audit.json", result))
        assert_eq(loaded.m, result.m, "T008 M")
        assert_eq(loaded.x_r.tolist(), result.x_r.tolist(), "T008 X_r")
        assert_eq(loaded.metadata, meta, "T008 metadata")

        csv_path = Path(tmpdir) / "results.csv"
        append_results_csv(csv_path, [result.to_row()], unique_on=KEY_COLUMNS)
        rerun = dict(result.to_row(), M=1.25)
        append_results_csv(csv_path, [rerun], unique_on=KEY_COLUMNS)
        table = pd.read_csv(csv_path)
        assert_eq(len(table), 1, "T008 replaced")
        assert_eq(float(table["M"].iloc[0]), 1.25, "T008 latest kept")

        append_results_csv(csv_path, [dict(rerun, seed=1)], unique_on=KEY_COLUMNS)
        assert_eq(len(pd.read_csv(csv_path)), 2, "T008 new seed appended")

    print("✓ T008 result_files")


def test_T009_kl_non_negative():
    """T009: KL is non-negative over 10^4 random distribution pairs, sparse ones included."""
    rng = np.random.default_rng(11)
    p = rng.dirichlet(np.full(10, 0.3), size=10_000)
    q = rng.dirichlet(np.full(10, 0.3), size=10_000)
    kl = kl_rows(p, q)
    assert_eq(kl.shape, (10_000,), "T009 shape")
    assert_eq(bool(np.all(np.isfinite(kl)) and np.all(kl >= 0.0)), True, "T009 non-negative")
    assert_eq(float(kl_rows(p, p).max()), 0.0, "T009 self")

    print("✓ T009 kl_non_negative")


def test_T010_symmetry_and_order():
    """T010: swapping the groups maps p to 1 - p; M and p ignore the order of probe images."""
    rng = np.random.default_rng(12)
    a, b = rng.normal(0.2, 1.0, 40), rng.normal(0.0, 1.5, 35)
    t_ab, p_ab = one_tailed_t_test(a, b)
    t_ba, p_ba = one_tailed_t_test(b, a)
    assert_close(t_ba, -t_ab, "T010 welch t")
    assert_close(p_ab + p_ba, 1.0, "T010 welch p")
    c = rng.normal(0.1, 1.0, 40)
    _, p_pair = one_tailed_t_test(a, c, paired=True)
    _, p_rev = one_tailed_t_test(c, a, paired=True)
    assert_close(p_pair + p_rev, 1.0, "T010 paired p")

    model = _glyph_detector("A")
    model.params["dense_0/kernel"].data[...] += 0.05 * rng.normal(size=(36, 3))
    ood = Dataset(rng.random((16, 6, 6, 1)), None, "noise", "ood")
    triple = build_probe_triple(ood, render_glyph("A"), seed=3)
    order = rng.permutation(16)
    shuffled = ProbeTriple(
        triple.d_c[order], triple.d_u[order], triple.d_r[order], triple.z_u,
        triple.r_seeds[order], triple.seed, triple.matched,
    )
    for test in ("welch", "paired"):
        first = m_score(model, triple, test=test)
        again = m_score(model, shuffled, test=test)
        assert_close(again.m, first.m, f"T010 {test} M", tol=1e-9)
        assert_close(again.p_value, first.p_value, f"T010 {test} p", tol=1e-9)

    print("✓ T010 symmetry_and_order")


def test_T011_null_calibration():
    """T011: untrained models never saw z_u; the default test stays above 0.05 in at least 17 of 20 runs."""
    results = []
    for seed in range(20):
        model = build_model("MLP-1", seed=seed)
        ood = Dataset(np.random.default_rng(100 + seed).random((100, 28, 28, 1)).astype(np.float32), None, "noise", "ood")
        triple = build_probe_triple(ood, render_glyph("A"), seed=seed)
        results.append(m_score(model, triple))

    calm = sum(r.p_value > 0.05 for r in results)
    if calm < 17:
        raise AssertionError(f"T011: only {calm}/20 runs with p > 0.05: {[round(r.p_value, 3) for r in results]}")
    m = np.array([r.m for r in results])
    se = m.std(ddof=1) / math.sqrt(len(m))
    if abs(m.mean()) > 3.0 * se:
        raise AssertionError(f"T011: mean M {m.mean():.3g} is more than 3 SE ({se:.3g}) from 0")

    print(f"✓ T011 null_calibration ({calm}/20)")


def test_T012_reference_test():
    """T012: the rank p-value counts references at or above the value; ties give (0, 0.5)."""
    t_stat, p_value = reference_test(3.0, [0.0, 1.0, 2.0])
    assert_close(p_value, 0.25, "T012 above all")
    assert_close(t_stat, 2.0 / math.sqrt(4.0 / 3.0), "T012 prediction t")
    assert_close(reference_test(1.5, [0.0, 1.0, 2.0, 3.0])[1], 3.0 / 5.0, "T012 middle")
    assert_eq(reference_test(1.0, [1.0, 1.0]), (0.0, 0.5), "T012 degenerate")
    assert_raises(DataError, lambda: reference_test(1.0, [0.5]), "T012 too few")

    triple = build_probe_triple(_blank_ood(4), render_glyph("C"), seed=9)
    first = [p.pixels for p in triple.reference_patches(5)]
    again = [p.pixels for p in triple.reference_patches(5)]
    assert_eq(all(np.array_equal(x, y) for x, y in zip(first, again)), True, "T012 seeded references")
    assert_eq(all(np.array_equal(np.sort(x.ravel()), np.sort(triple.z_u.pixels.ravel())) for x in first),
              True, "T012 matched pixel values")

    print("✓ T012 reference_test")


def test_T013_white_box_spread():
    """T013: M_w re-evaluated over fresh control draws gives one value per seed, the first equal to mw_score."""
    model = _glyph_detector("A")
    d_y = Dataset(np.random.default_rng(13).random((6, 6, 6, 1)), np.zeros(6, dtype=np.int64), "toy", num_classes=3)
    spread = mw_score_spread(model, d_y, render_glyph("A"), seeds=[4, 5, 6])
    assert_eq(len(spread.values), 3, "T013 count")
    assert_close(spread.values[0], mw_score(model, d_y, render_glyph("A"), 4).m_w, "T013 first draw")
    assert_eq(bool(spread.std >= 0.0 and spread.range >= 0.0), True, "T013 spread")

    print("✓ T013 white_box_spread")


def main_tests():
    print("=" * 60)
    print("Score Contract Tests")
    print("=" * 60)

    tests = [
        test_T001_kl_divergence,
        test_T002_one_tailed_t_test,
        test_T003_degenerate_samples,
        test_T004_m_score_detects_glyph,
        test_T005_m_score_insensitive_model,
        test_T006_white_box_score,
        test_T007_spread_over_patch_draws,
        test_T008_result_files,
        test_T009_kl_non_negative,
        test_T010_symmetry_and_order,
        test_T011_null_calibration,
        test_T012_reference_test,
        test_T013_white_box_spread,
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
