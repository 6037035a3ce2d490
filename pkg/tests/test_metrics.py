import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from moespnet.metrics import (ConfusionMatrix, LabelRangeError, UndefinedMetricError, all_metrics,
                              mean_acc, mean_iou, metrics_json, per_class_iou, pixel_acc, weighted_iou)

KEYS = ("pixel_acc", "mean_acc", "mean_iou", "weighted_iou")


def test_hand_count():
    cm = ConfusionMatrix(2).accumulate(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]))
    np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 2]])


def test_hand_metrics():
    cm = ConfusionMatrix(2, np.array([[1, 1], [0, 2]]))
    assert pixel_acc(cm) == 0.75
    assert mean_acc(cm) == 0.75
    assert mean_iou(cm) == pytest.approx(7 / 12, abs=1e-15)
    assert weighted_iou(cm) == pytest.approx(7 / 12, abs=1e-15)


def test_perfect_prediction(rng):
    gt = rng.integers(0, 4, (3, 8, 8))
    m = all_metrics(ConfusionMatrix(4).accumulate(gt, gt))
    assert all(m[k] == 1.0 for k in KEYS)
    assert np.count_nonzero(ConfusionMatrix(4).accumulate(gt, gt).counts - np.diag(np.bincount(gt.ravel(), minlength=4))) == 0


def test_empty_image_leaves_matrix():
    cm = ConfusionMatrix(3).accumulate(np.zeros((0, 0), int), np.zeros((0, 0), int))
    assert cm.total == 0
    with pytest.raises(UndefinedMetricError):
        pixel_acc(cm)


@given(st.integers(0, 2**32 - 1))
def test_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    gt = r.integers(0, 8, (32, 32))
    gt[r.random((32, 32)) < 0.1] = 255
    pred = np.where(r.random((32, 32)) < 0.4, gt % 8, r.integers(0, 8, (32, 32)))
    got = all_metrics(ConfusionMatrix(8).accumulate(pred, gt))
    want = oracles.metrics(pred, gt, 8)
    for k in KEYS:
        assert abs(got[k] - want[k]) <= 1e-12, k


def test_missing_class_is_excluded():
    # class 2 never appears: it drops out of the class averages
    cm = ConfusionMatrix(3, np.array([[2, 0, 0], [0, 2, 0], [0, 0, 0]]))
    assert mean_iou(cm) == 1.0 and mean_acc(cm) == 1.0
    assert mean_iou(cm, zero_division="zero") == pytest.approx(2 / 3)
    assert per_class_iou(cm)[2] is None


@given(st.integers(0, 2**32 - 1))
def test_order_and_linearity(seed):
    r = np.random.default_rng(seed)
    preds = r.integers(0, 5, (4, 6, 6))
    gts = r.integers(0, 5, (4, 6, 6))
    a = ConfusionMatrix(5)
    for i in range(4):
        a.accumulate(preds[i], gts[i])
    b = ConfusionMatrix(5)
    for i in r.permutation(4):
        b.accumulate(preds[i], gts[i])
    c = ConfusionMatrix(5).accumulate(preds[:2], gts[:2]) + ConfusionMatrix(5).accumulate(preds[2:], gts[2:])
    for other in (b, c):
        assert np.array_equal(a.counts, other.counts)
    m = all_metrics(a)
    assert all(0 <= m[k] <= 1 for k in KEYS)


def test_total_excludes_ignored():
    gt = np.array([[0, 255], [1, 255]])
    assert ConfusionMatrix(2).accumulate(np.zeros((2, 2), int), gt).total == 2


def test_out_of_range_labels_name_pixel():
    with pytest.raises(LabelRangeError, match=r"\(1, 0\)"):
        ConfusionMatrix(2).accumulate(np.zeros((2, 2), int), np.array([[0, 1], [7, 0]]))
    with pytest.raises(LabelRangeError, match="predicted"):
        ConfusionMatrix(2).accumulate(np.array([[0, 3]]), np.array([[0, 1]]))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        ConfusionMatrix(2).accumulate(np.zeros((2, 2), int), np.zeros((2, 3), int))


def test_json_shape():
    payload = json.loads(metrics_json(ConfusionMatrix(2, np.array([[1, 1], [0, 2]]))))
    assert set(payload) == set(KEYS) | {"per_class_iou"}
    assert payload["per_class_iou"] == pytest.approx([0.5, 2 / 3])


def test_bad_zero_division_option():
    with pytest.raises(ValueError):
        mean_iou(ConfusionMatrix(2, np.eye(2, dtype=int)), zero_division="nan")
