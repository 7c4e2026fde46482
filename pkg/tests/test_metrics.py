import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mlcam.errors import DataError, DimensionError
from mlcam.metrics import (
    SegScores,
    confusion,
    majority_vote,
    mean_scores,
    read_metric_rows,
    score,
    write_metric_rows,
)
from oracles import loop_metrics

masks = arrays(np.bool_, st.tuples(st.integers(1, 8), st.integers(1, 8)))


def test_hand_example():
    gt = np.array([[1, 1], [0, 0]], bool)
    pred = np.array([[1, 0], [0, 0]], bool)
    s = score(pred, gt)
    # background: 2/2 correct, IU 2/3; foreground: 1/2 correct, IU 1/2
    assert s.mean_acc == 0.75
    assert s.mean_IU == pytest.approx(7 / 12, abs=1e-15)
    assert s.fw_IU == pytest.approx(7 / 12, abs=1e-15)


def test_perfect_and_absent_class():
    gt = np.zeros((3, 3), bool)
    assert score(gt, gt) == SegScores(1.0, 1.0, 1.0)
    pred = gt.copy()
    pred[0, 0] = True
    s = score(pred, gt)
    # only background is present in the ground truth
    assert s.mean_acc == pytest.approx(8 / 9) and s.mean_IU == pytest.approx(8 / 9)


@given(st.data())
def test_matches_loop_oracle(data):
    gt = data.draw(masks)
    pred = data.draw(arrays(np.bool_, gt.shape))
    s = score(pred, gt)
    assert tuple(s) == pytest.approx(loop_metrics(pred, gt), abs=1e-15)


@given(st.data())
def test_confusion_transposes_when_roles_swap(data):
    gt = data.draw(masks)
    pred = data.draw(arrays(np.bool_, gt.shape))
    np.testing.assert_array_equal(confusion(pred, gt).n, confusion(gt, pred).n.T)


@given(st.data())
def test_mean_iu_is_symmetric_when_both_classes_present(data):
    gt = data.draw(masks)
    pred = data.draw(arrays(np.bool_, gt.shape))
    if gt.all() or not gt.any() or pred.all() or not pred.any():
        return
    assert score(pred, gt).mean_IU == pytest.approx(score(gt, pred).mean_IU, abs=1e-15)


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_fw_equals_mean_for_balanced_classes(half, seed):
    rng = np.random.default_rng(seed)
    gt = np.array([True] * half + [False] * half)
    pred = rng.uniform(size=2 * half) < 0.5
    s = score(pred, gt)
    assert s.fw_IU == pytest.approx(s.mean_IU, abs=1e-15)


@given(st.data())
def test_scores_are_bounded(data):
    gt = data.draw(masks)
    pred = data.draw(arrays(np.bool_, gt.shape))
    assert all(0.0 <= v <= 1.0 for v in score(pred, gt))


def test_shape_and_empty_errors():
    with pytest.raises(DimensionError):
        score(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DataError):
        score(np.zeros((0, 2)), np.zeros((0, 2)))


def test_majority_vote():
    a = np.array([1, 1, 0, 0], bool)
    b = np.array([1, 0, 1, 0], bool)
    c = np.array([1, 0, 0, 1], bool)
    assert majority_vote([a, b, c]).tolist() == [True, False, False, False]
    # two annotators: a 1-1 split is not a majority
    assert majority_vote([a, b]).tolist() == [True, False, False, False]
    assert majority_vote([a]).tolist() == a.tolist()
    with pytest.raises(DataError):
        majority_vote([])


def test_metric_rows_roundtrip(tmp_path):
    rows = [("s00001", "M2", "intermediate", SegScores(0.1, 1 / 3, 0.7))]
    write_metric_rows(tmp_path / "m.csv", rows)
    assert read_metric_rows(tmp_path / "m.csv") == rows
    assert mean_scores([SegScores(0, 0, 0), SegScores(1, 0.5, 1)]) == SegScores(0.5, 0.25, 0.5)
