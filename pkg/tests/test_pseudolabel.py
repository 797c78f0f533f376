import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forec import pseudolabel as pl
from forec.errors import ProbabilityError


def px(*values):
    """Single-pixel probability map [C,1,1]."""
    return np.array(values, dtype=np.float64)[:, None, None]


def random_probs(rng, c=4, h=6, w=7, sharp=3.0):
    logits = rng.normal(size=(c, h, w)) * sharp
    e = np.exp(logits - logits.max(0))
    return e / e.sum(0)


def test_pseudo_label_examples():
    out = pl.make_pseudo_labels(px(0.7, 0.2, 0.1), 0.6)
    assert out.label[0, 0] == 0 and out.confidence[0, 0] == 0.7
    assert pl.make_pseudo_labels(px(0.7, 0.2, 0.1), 0.75).label[0, 0] == 255


def test_tau_zero_labels_everything():
    probs = random_probs(np.random.default_rng(0))
    out = pl.make_pseudo_labels(probs, 0.0)
    np.testing.assert_array_equal(out.label, probs.argmax(0))


def test_ties_go_to_lowest_class():
    assert pl.make_pseudo_labels(px(0.5, 0.5), 0.0).label[0, 0] == 0


def test_rejects_unnormalized():
    with pytest.raises(ProbabilityError):
        pl.make_pseudo_labels(px(0.7, 0.2), 0.5)
    with pytest.raises(ProbabilityError):
        pl.make_pseudo_labels(px(1.1, -0.1), 0.5)
    # within tolerance is fine
    pl.make_pseudo_labels(px(0.7, 0.29995), 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_monotone_in_tau(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    probs = random_probs(np.random.default_rng(seed))
    kept_lo = pl.make_pseudo_labels(probs, lo).label != 255
    kept_hi = pl.make_pseudo_labels(probs, hi).label != 255
    assert not (kept_hi & ~kept_lo).any()


def test_labeled_target_examples():
    image = np.zeros((3, 1, 2), np.float32)
    image[:, 0, 0] = (0.3, 0.5, 0.2)
    image[:, 0, 1] = (0.9, 0.9, 0.9)
    t = pl.forec_target_labeled(image, np.array([[1, 0]]), {1, 2})
    np.testing.assert_array_equal(t.target[:, 0, 0], image[:, 0, 0])
    np.testing.assert_array_equal(t.target[:, 0, 1], 0)
    np.testing.assert_array_equal(t.mask, 1)


def test_labeled_all_background_and_ignore():
    image = np.random.default_rng(1).random((3, 4, 4))
    gt = np.zeros((4, 4), np.uint8)
    gt[0, 0] = 255
    t = pl.forec_target_labeled(image, gt, {1, 2, 3})
    assert not t.target.any()
    assert t.mask[0, 0, 0] == 0 and t.mask.sum() == 15


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_labeled_target_exact_and_idempotent(seed):
    rng = np.random.default_rng(seed)
    image = rng.random((2, 3, 5, 5)).astype(np.float32)
    gt = rng.integers(0, 4, size=(2, 5, 5)).astype(np.uint8)
    t = pl.forec_target_labeled(image, gt, {1, 2, 3})
    fg = np.broadcast_to((gt > 0)[:, None], image.shape)
    assert np.array_equal(t.target[fg], image[fg])  # bit-exact
    assert (t.target[~fg] == 0).all()
    again = pl.forec_target_labeled(t.target, gt, {1, 2, 3})
    assert np.array_equal(again.target, t.target)


def test_unlabeled_scenario_examples():
    image = np.full((3, 1, 1), 0.4)
    s1 = pl.forec_target_unlabeled(image, px(0.1, 0.8, 0.1), 0.6, {1, 2})
    assert s1.mask[0, 0, 0] == 1 and (s1.target == 0.4).all()
    s2 = pl.forec_target_unlabeled(image, px(0.8, 0.1, 0.1), 0.6, {1, 2})
    assert s2.mask[0, 0, 0] == 1 and (s2.target == 0).all()
    s3 = pl.forec_target_unlabeled(image, px(0.4, 0.35, 0.25), 0.6, {1, 2})
    assert s3.mask[0, 0, 0] == 0 and (s3.target == 0).all()


def test_scenario_one_is_checked_before_two():
    # an object class above tau wins even if a non-object class is also above tau
    probs = px(0.0, 0.5, 0.5)
    assert pl.scenario_map(probs, 0.4, {1})[0, 0] == pl.SCENARIO_FOREGROUND
    assert pl.scenario_map(probs, 0.4, {2})[0, 0] == pl.SCENARIO_FOREGROUND


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 0.99))
def test_scenario_partition(seed, tau):
    rng = np.random.default_rng(seed)
    probs = random_probs(rng, sharp=float(rng.uniform(0.5, 6)))
    objects = {1, 2, 3}
    s = pl.scenario_map(probs, tau, objects)
    one = probs[1:].max(0) > tau
    two = ~one & (probs.max(0) > tau)
    three = ~one & ~two
    # exactly one scenario per pixel, matching the rule written out independently
    assert (one.astype(int) + two + three == 1).all()
    np.testing.assert_array_equal(s == 1, one)
    np.testing.assert_array_equal(s == 2, two)
    np.testing.assert_array_equal(s == 3, three)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_perfect_teacher_matches_labeled_target(seed):
    rng = np.random.default_rng(seed)
    image = rng.random((3, 6, 6))
    gt = rng.integers(0, 4, size=(6, 6))
    onehot = np.eye(4)[gt].transpose(2, 0, 1)
    a = pl.forec_target_unlabeled(image, onehot, 0.95, {1, 2, 3})
    b = pl.forec_target_labeled(image, gt, {1, 2, 3})
    assert np.array_equal(a.target, b.target) and np.array_equal(a.mask, b.mask)


def test_standard_target():
    image = np.random.default_rng(2).random((2, 3, 4, 4))
    t = pl.standard_rec_target(image)
    assert np.array_equal(t.target, image) and t.mask.shape == (2, 1, 4, 4) and (t.mask == 1).all()
    gt = np.random.default_rng(3).integers(0, 4, size=(2, 4, 4))
    sat = pl.forec_target_labeled(image, gt, {0, 1, 2, 3})
    assert np.array_equal(sat.target, t.target) and np.array_equal(sat.mask, t.mask)


def test_standard_target_zero_loss():
    from forec.core.ops import masked_mse_forward
    image = np.random.default_rng(4).random((1, 3, 4, 4))
    t = pl.standard_rec_target(image)
    assert masked_mse_forward(image, t.target, t.mask)[0] == 0.0


def test_fgbg_target():
    lab = np.array([[0, 1, 3], [255, 2, 0]], np.uint8)
    np.testing.assert_array_equal(pl.fgbg_target(lab, {1, 2, 3}), [[0, 1, 1], [255, 1, 0]])
    assert not pl.fgbg_target(np.zeros((3, 3), np.uint8), {1}).any()
