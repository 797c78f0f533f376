"""Pseudo-labels from teacher posteriors and auxiliary-head targets.

Probability maps are [..., C, H, W]; images [..., 3, H, W]; label maps
[..., H, W]; masks [..., 1, H, W]. Leading batch axes are optional.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from forec.core.ops import IGNORE_INDEX
from forec.errors import ProbabilityError

SCENARIO_FOREGROUND = 1
SCENARIO_BACKGROUND = 2
SCENARIO_UNCERTAIN = 3
PROB_TOLERANCE = 1e-4


@dataclass
class PseudoLabelMap:
    label: np.ndarray       # uint8, 255 where no pseudo-label
    confidence: np.ndarray  # max class posterior


@dataclass
class MaskedTarget:
    target: np.ndarray
    mask: np.ndarray


def _check_probs(probs):
    probs = np.asarray(probs)
    if (probs < 0).any():
        raise ProbabilityError("probabilities must be nonnegative")
    err = np.abs(probs.sum(axis=-3, dtype=np.float64) - 1.0).max(initial=0.0)
    if err > PROB_TOLERANCE:
        raise ProbabilityError(f"per-pixel probabilities sum to 1 only within {err:.3g}")
    return probs


def make_pseudo_labels(probs, tau: float) -> PseudoLabelMap:
    """Argmax where the max posterior exceeds ``tau`` (ties go to the lowest class)."""
    probs = _check_probs(probs)
    conf = probs.max(axis=-3)
    label = np.argmax(probs, axis=-3).astype(np.uint8)
    label[~(conf > tau)] = IGNORE_INDEX
    return PseudoLabelMap(label, conf)


def _in_set(label, object_set) -> np.ndarray:
    return np.isin(label, np.asarray(sorted(object_set), dtype=np.int64))


def scenario_map(probs, tau: float, object_set) -> np.ndarray:
    """Per-pixel scenario for unlabeled images.

    1: max over object classes > tau (confident foreground)
    2: otherwise a pseudo-label exists, i.e. max over all classes > tau
    3: otherwise (uncertain, excluded from the loss)
    """
    probs = _check_probs(probs)
    objects = np.asarray(sorted(object_set), dtype=np.int64)
    fg_max = np.take(probs, objects, axis=-3).max(axis=-3)
    any_max = probs.max(axis=-3)
    out = np.full(any_max.shape, SCENARIO_UNCERTAIN, dtype=np.uint8)
    out[any_max > tau] = SCENARIO_BACKGROUND
    out[fg_max > tau] = SCENARIO_FOREGROUND
    return out


def _broadcast_keep(keep, image):
    return np.broadcast_to(keep[..., None, :, :], image.shape)


def forec_target_labeled(image, gt_label, object_set) -> MaskedTarget:
    """Foreground pixels keep the image, background is 0; ignore pixels get mask 0."""
    image = np.asarray(image)
    fg = _in_set(gt_label, object_set)
    target = np.where(_broadcast_keep(fg, image), image, 0).astype(image.dtype)
    mask = (np.asarray(gt_label) != IGNORE_INDEX)[..., None, :, :].astype(image.dtype)
    return MaskedTarget(target, mask)


def forec_target_from_scenarios(image, scenarios) -> MaskedTarget:
    image = np.asarray(image)
    fg = scenarios == SCENARIO_FOREGROUND
    target = np.where(_broadcast_keep(fg, image), image, 0).astype(image.dtype)
    mask = (scenarios != SCENARIO_UNCERTAIN)[..., None, :, :].astype(image.dtype)
    return MaskedTarget(target, mask)


def forec_target_unlabeled(image, probs, tau: float, object_set) -> MaskedTarget:
    return forec_target_from_scenarios(image, scenario_map(probs, tau, object_set))


def standard_rec_target(image) -> MaskedTarget:
    image = np.asarray(image)
    mask = np.ones(image.shape[:-3] + (1,) + image.shape[-2:], dtype=image.dtype)
    return MaskedTarget(image.copy(), mask)


def fgbg_target(label, object_set) -> np.ndarray:
    """1 for object classes, 0 for background, 255 kept."""
    label = np.asarray(label)
    out = _in_set(label, object_set).astype(np.uint8)
    out[label == IGNORE_INDEX] = IGNORE_INDEX
    return out
