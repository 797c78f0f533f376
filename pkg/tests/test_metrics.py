import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forec.errors import DataError, LabelError
from forec.metrics import ConfusionMatrix, accumulate, miou
from oracles import set_iou, set_miou


def test_hand_counted_matrix():
    cm = accumulate(ConfusionMatrix(2), np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
    np.testing.assert_array_equal(cm.counts, [[1, 0], [1, 2]])
    per, mean = miou(cm)
    assert per == [0.5, 2 / 3]
    assert mean == pytest.approx(0.5833, abs=5e-5)


def test_perfect_prediction():
    gt = np.array([[0, 1], [2, 2]])
    cm = ConfusionMatrix(4).accumulate(gt, gt)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    per, mean = cm.miou()
    assert per == [1.0, 1.0, 1.0, None] and mean == 1.0


def test_disjoint_binary_prediction():
    gt = np.array([0, 1, 0, 1])
    assert ConfusionMatrix(2).accumulate(1 - gt, gt).miou()[1] == 0.0


def test_ignored_pixels_excluded():
    cm = ConfusionMatrix(3).accumulate(np.array([1, 2]), np.array([255, 255]))
    assert cm.total == 0
    with pytest.raises(DataError, match="no evaluable classes"):
        cm.miou()


def test_errors():
    with pytest.raises(LabelError):
        ConfusionMatrix(2).accumulate(np.array([2]), np.array([0]))
    with pytest.raises(DataError):
        ConfusionMatrix(2).accumulate(np.array([0, 1]), np.array([0]))


def test_brute_force_oracle_100_maps():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = int(rng.integers(2, 5))
        gt = rng.integers(0, c, size=(8, 8))
        gt[rng.random((8, 8)) < 0.1] = 255
        pred = rng.integers(0, c, size=(8, 8))
        cm = ConfusionMatrix(c).accumulate(pred, gt)
        per, mean = cm.miou()
        ref = set_iou(pred, gt, c)
        assert per == [None if r is None else float(r) for r in ref]
        assert mean == pytest.approx(float(set_miou(pred, gt, c)), rel=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_class_permutation(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 4, size=(6, 6))
    pred = rng.integers(0, 4, size=(6, 6))
    perm = rng.permutation(4)
    per, mean = ConfusionMatrix(4).accumulate(pred, gt).miou()
    per2, mean2 = ConfusionMatrix(4).accumulate(perm[pred], perm[gt]).miou()
    assert [per2[perm[k]] for k in range(4)] == per
    assert mean2 == pytest.approx(mean, rel=1e-12)


def test_order_independence_and_sum():
    rng = np.random.default_rng(3)
    maps = [(rng.integers(0, 3, (5, 5)), rng.integers(0, 3, (5, 5))) for _ in range(6)]
    fwd, rev = ConfusionMatrix(3), ConfusionMatrix(3)
    for p, g in maps:
        fwd.accumulate(p, g)
    for p, g in reversed(maps):
        rev.accumulate(p, g)
    parts = [ConfusionMatrix(3).accumulate(p, g) for p, g in maps]
    total = parts[0]
    for part in parts[1:]:
        total = total + part
    np.testing.assert_array_equal(fwd.counts, rev.counts)
    np.testing.assert_array_equal(fwd.counts, total.counts)
    assert fwd.total == 150
