"""
Test runner for influence contract.
Validates implementation against contracts/influence.yaml assertions.
"""

import math
import sys
import tempfile
from pathlib import Path
from types import SimpleNamespace

import numpy as np
from scipy import stats

# Add package to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from memaudit.data import Dataset
from memaudit.errors import DataError, FormatError
from memaudit.influence import (
    CheckpointEntry, CheckpointSet, InfluenceRecord, loss_cutoff_epoch, rank_canaries,
    read_influence_csv, select_checkpoints, self_influence_table, tracin_self_influence,
    write_influence_csv,
)
from memaudit.nn import Dense, Flatten, Model, Softmax

LOSSES = [2.0, 1.5, 1.0, 0.6, 0.3, 0.2, 0.15, 0.1, 0.1, 0.1]


def assert_eq(actual, expected, context: str):
    if actual != expected:
        raise AssertionError(f"{context}: expected {expected!r}, got {actual!r}")


def assert_close(actual, expected, context: str, tol: float = 1e-9):
    if not math.isclose(actual, expected, rel_tol=tol, abs_tol=tol):
        raise AssertionError(f"{context}: expected {expected!r}, got {actual!r}")


def assert_raises(exc, fn, context: str):
    try:
        fn()
    except exc:
        return
    raise AssertionError(f"{context}: expected {exc.__name__}")


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _logistic_model(flat=True):
    if flat:
        return Model([Dense(2), Softmax()], (1,), 2, seed=0, dtype=np.float64)
    return Model([Flatten(), Dense(2), Softmax()], (1, 1, 1), 2, seed=0, dtype=np.float64)


def _snapshot(w, b, prefix="dense_0"):
    return {f"{prefix}/kernel": np.array(w, dtype=np.float64).reshape(1, 2),
            f"{prefix}/bias": np.array(b, dtype=np.float64)}


def _manual_sq_norm(w, b, x, y):
    p = _softmax(x * np.asarray(w).reshape(2) + np.asarray(b))
    e = np.eye(2)[y]
    return float(np.sum((p - e) ** 2) * (x * x + 1.0))


def test_T001_checkpoint_selection():
    """T001: E* is the first epoch covering 95% of the loss drop; k epochs evenly spaced in [0, E*]."""
    assert_eq(loss_cutoff_epoch(LOSSES), 6, "T001 cutoff")
    assert_eq(select_checkpoints(LOSSES, 4), [0, 2, 4, 6], "T001 k=4")
    assert_eq(select_checkpoints(LOSSES, 10), [0, 1, 2, 3, 4, 5, 6], "T001 deduplicated")
    assert_eq(select_checkpoints([1.0, 1.0, 1.0], 5), [0], "T001 flat history")
    assert_raises(DataError, lambda: select_checkpoints(LOSSES, 0), "T001 k=0")
    assert_raises(DataError, lambda: loss_cutoff_epoch([]), "T001 empty")

    print("✓ T001 checkpoint_selection")


def test_T002_tracin_matches_closed_form():
    """T002: self-influence equals sum of lr * ||grad||^2 worked out by hand for softmax regression."""
    snaps = [([0.3, -0.2], [0.1, 0.0]), ([1.0, -1.0], [0.0, 0.2])]
    ckpts = CheckpointSet([
        CheckpointEntry(0, 0.1, snapshot=_snapshot(*snaps[0])),
        CheckpointEntry(5, 0.05, snapshot=_snapshot(*snaps[1])),
    ])
    model = _logistic_model()
    before = model.weights_hash()

    record = tracin_self_influence(ckpts, model, np.array([0.7]), 1, sample_index=3)
    expected = [0.1 * _manual_sq_norm(*snaps[0], 0.7, 1), 0.05 * _manual_sq_norm(*snaps[1], 0.7, 1)]
    assert_close(record.terms[0], expected[0], "T002 first term")
    assert_close(record.terms[1], expected[1], "T002 second term")
    assert_close(record.self_influence, sum(expected), "T002 total")
    assert_eq((record.sample_index, record.label), (3, 1), "T002 meta")
    assert_eq(model.weights_hash(), before, "T002 weights restored")

    print("✓ T002 tracin_matches_closed_form")


def test_T003_table_matches_single_sample():
    """T003: the batched table agrees with per-example evaluation and honours index subsets."""
    rng = np.random.default_rng(1)
    data = Dataset(rng.random((9, 1, 1, 1)), rng.integers(0, 2, size=9), "toy", num_classes=2)
    ckpts = CheckpointSet([
        CheckpointEntry(0, 0.2, snapshot=_snapshot([0.5, -0.5], [0.0, 0.0])),
        CheckpointEntry(1, 0.2, snapshot=_snapshot([2.0, -1.0], [0.3, -0.3])),
    ])
    model = _logistic_model(flat=False)
    table = self_influence_table(ckpts, model, data, batch_size=4)
    assert_eq([r.sample_index for r in table], list(range(9)), "T003 order")
    for r in table:
        single = tracin_self_influence(ckpts, model, data.images[r.sample_index], int(data.labels[r.sample_index]))
        assert_close(r.self_influence, single.self_influence, f"T003 sample {r.sample_index}")

    subset = self_influence_table(ckpts, model, data, indices=[7, 2])
    assert_eq([r.sample_index for r in subset], [7, 2], "T003 subset")
    assert_close(subset[0].self_influence, table[7].self_influence, "T003 subset value")

    unlabelled = Dataset(data.images, None, "toy")
    assert_raises(DataError, lambda: self_influence_table(ckpts, model, unlabelled), "T003 labels")

    print("✓ T003 table_matches_single_sample")


def test_T004_rank_canaries():
    """T004: top-k by descending and bottom-k by ascending influence; ties go to the lower index."""
    records = [InfluenceRecord(i, 0, v) for i, v in enumerate([3.0, 1.0, 3.0, 0.0, 2.0, 1.0])]
    top, bottom = rank_canaries(records, k=2)
    assert_eq(top, [0, 2], "T004 top")
    assert_eq(bottom, [3, 1], "T004 bottom")
    assert_eq(rank_canaries(records, k=3)[1], [3, 1, 5], "T004 tied bottom")
    assert_raises(DataError, lambda: rank_canaries(records, k=4), "T004 too few")

    print("✓ T004 rank_canaries")


def test_T005_influence_csv():
    """T005: influence.csv keeps sample_index, label and self_influence."""
    records = [InfluenceRecord(0, 1, 0.25), InfluenceRecord(1, 0, 1e-9)]
    with tempfile.TemporaryDirectory() as tmpdir:
        path = write_influence_csv(Path(tmpdir) / "influence.csv", records)
        header = path.read_text().splitlines()[0]
        assert_eq(header, "sample_index,label,self_influence", "T005 header")
        loaded = read_influence_csv(path)
        assert_eq([(r.sample_index, r.label) for r in loaded], [(0, 1), (1, 0)], "T005 rows")
        assert_close(loaded[1].self_influence, 1e-9, "T005 value", tol=1e-15)

    print("✓ T005 influence_csv")


def test_T006_checkpoints_from_run():
    """T006: a run's loss history picks the epochs; a missing snapshot raises FormatError."""
    snaps = {e: _snapshot([0.1 * e, 0.0], [0.0, 0.0]) for e in range(10)}
    run = SimpleNamespace(
        history=[SimpleNamespace(train_loss=v) for v in LOSSES],
        checkpoints=snaps,
        config=SimpleNamespace(learning_rate=3e-4),
    )
    ckpts = CheckpointSet.from_run(run, k=4)
    assert_eq(ckpts.epochs, [0, 2, 4, 6], "T006 epochs")
    assert_eq(ckpts.metadata()["learning_rates"], [3e-4] * 4, "T006 eta")
    assert_eq(ckpts.cutoff_epoch, 6, "T006 cutoff")

    del run.checkpoints[4]
    assert_raises(FormatError, lambda: CheckpointSet.from_run(run, k=4), "T006 missing")
    assert_raises(
        DataError,
        lambda: CheckpointSet([CheckpointEntry(2, 0.1, {}), CheckpointEntry(1, 0.1, {})]),
        "T006 order",
    )

    print("✓ T006 checkpoints_from_run")


def _train(x, y, steps=300, lr=0.5, record_every=None):
    """Full-batch gradient descent on 2-class softmax regression from zero weights."""
    w = np.zeros(2)
    b = np.zeros(2)
    onehot = np.eye(2)[y]
    history = []
    for step in range(1, steps + 1):
        p = _softmax(x[:, None] * w[None, :] + b[None, :])
        err = (p - onehot) / len(x)
        w = w - lr * (err * x[:, None]).sum(axis=0)
        b = b - lr * err.sum(axis=0)
        if record_every and step % record_every == 0:
            history.append((w.copy(), b.copy()))
    return w, b, history


def _loss(w, b, x, y):
    return float(-np.log(_softmax(x * w + b)[y]))


def test_T007_leave_one_out_oracle():
    """T007: self-influence ranks 20 examples like the leave-one-out change in their own loss."""
    rng = np.random.default_rng(0)
    y = np.array([0] * 10 + [1] * 10)
    x = np.where(y == 1, 1.0, -1.0) + rng.normal(0.0, 1.0, size=20)
    y[0], y[10] = 1, 0

    w, b, history = _train(x, y, record_every=30)
    ckpts = CheckpointSet([
        CheckpointEntry(i, 0.5, snapshot=_snapshot(hw, hb)) for i, (hw, hb) in enumerate(history)
    ])
    model = _logistic_model()
    influence = [tracin_self_influence(ckpts, model, np.array([x[i]]), int(y[i])).self_influence for i in range(20)]

    loo = []
    for i in range(20):
        keep = np.arange(20) != i
        w_i, b_i, _ = _train(x[keep], y[keep])
        loo.append(_loss(w_i, b_i, x[i], y[i]) - _loss(w, b, x[i], y[i]))

    rho = stats.spearmanr(influence, loo).correlation
    if not rho > 0.5:
        raise AssertionError(f"T007: Spearman correlation {rho:.3f} <= 0.5")

    print("✓ T007 leave_one_out_oracle")


def main_tests():
    print("=" * 60)
    print("Influence Contract Tests")
    print("=" * 60)

    tests = [
        test_T001_checkpoint_selection,
        test_T002_tracin_matches_closed_form,
        test_T003_table_matches_single_sample,
        test_T004_rank_canaries,
        test_T005_influence_csv,
        test_T006_checkpoints_from_run,
        test_T007_leave_one_out_oracle,
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
