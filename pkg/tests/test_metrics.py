import warnings

import numpy as np
import pytest

from ddcmnet.metrics import ConfusionMatrix, UndefinedClassWarning, accumulate, normalize, scores


def cm_of(pred, label, c=2, **kw):
    return accumulate(ConfusionMatrix(c), np.array(pred), np.array(label), **kw)


def test_hand_counted_matrix_and_scores():
    cm = cm_of([0, 0, 1, 1], [0, 1, 1, 1])
    np.testing.assert_array_equal(cm.counts, [[1, 0], [1, 2]])
    s = scores(cm)
    assert s.precision[1] == 1.0
    assert abs(s.recall[1] - 2 / 3) < 1e-15
    assert abs(s.f1[1] - 0.8) < 1e-15
    assert abs(s.iou[1] - 2 / 3) < 1e-15
    assert s.oa == 0.75


def test_perfect_prediction_and_empty_maps():
    cm = cm_of([0, 1, 2, 2], [0, 1, 2, 2], c=3)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    s = scores(cm)
    assert s.mean_f1 == s.mean_iou == s.oa == 1.0
    before = cm.counts.copy()
    accumulate(cm, np.zeros(0, int), np.zeros(0, int))
    np.testing.assert_array_equal(cm.counts, before)


def test_ignore_exclude_and_undefined_classes():
    cm = cm_of([0, 1, 0, 2], [0, 1, 255, 1], c=4, ignore_id=255)
    assert cm.ignored == 1 and cm.total == 3
    with pytest.warns(UndefinedClassWarning):
        s = scores(cm)
    assert np.isnan(s.f1[3]) and 3 not in s.counted
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        s2 = scores(cm, excluded=(2, 3))
    assert s2.counted == (0, 1)
    assert s2.mean_f1 == pytest.approx((s2.f1[0] + s2.f1[1]) / 2)
    with pytest.raises(ValueError):
        cm_of([0, 5], [0, 1])
    with pytest.raises(ValueError):
        cm_of([0], [0, 1])
    with pytest.raises(ValueError):
        scores(ConfusionMatrix(2))


def test_scores_against_set_oracle():
    rng = np.random.default_rng(0)
    label = rng.integers(0, 3, 10_000)
    pred = np.where(rng.random(10_000) < 0.7, label, rng.integers(0, 3, 10_000))
    s = scores(cm_of(pred, label, c=3))
    idx = np.arange(label.size)
    for c in range(3):
        truth, guess = set(idx[label == c]), set(idx[pred == c])
        inter, union = len(truth & guess), len(truth | guess)
        assert abs(s.iou[c] - inter / union) <= 1e-12
        assert abs(s.f1[c] - 2 * inter / (len(truth) + len(guess))) <= 1e-12
        assert abs(s.precision[c] - inter / len(guess)) <= 1e-12
        assert abs(s.recall[c] - inter / len(truth)) <= 1e-12
    assert abs(s.oa - np.mean(pred == label)) <= 1e-12


def test_matrices_add():
    a, b = cm_of([0, 1], [0, 0]), cm_of([1], [1])
    np.testing.assert_array_equal((a + b).counts, [[1, 1], [0, 1]])
    with pytest.raises(ValueError):
        a + ConfusionMatrix(3)


def test_normalize():
    norm, empty = normalize(ConfusionMatrix(2, np.array([[1, 1], [0, 2]])))
    np.testing.assert_array_equal(norm, [[0.5, 0.5], [0, 1]])
    assert not empty.any()
    norm, empty = normalize(ConfusionMatrix(3, np.diag([2, 0, 5])))
    np.testing.assert_array_equal(norm, np.diag([1.0, 0.0, 1.0]))
    assert empty.tolist() == [False, True, False]
