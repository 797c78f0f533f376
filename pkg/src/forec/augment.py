"""Weak (flip) and strong (zoom, jitter, grayscale, blur, CutMix) augmentations.

Images are float [3,H,W], label-like maps are integer [H,W]. Geometric ops
(flip, zoom, CutMix) are recorded in an :class:`AugRecord` so they can be
replayed on any other per-pixel map, e.g. pseudo-labels computed on the
teacher's view.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from forec.core.ops import IGNORE_INDEX

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass
class AugmentConfig:
    flip_p: float = 0.5
    zoom_p: float = 0.25
    scale_min: float = 0.5
    scale_max: float = 2.0
    jitter_p: float = 0.5
    jitter_gain: float = 0.2
    jitter_shift: float = 0.1
    gray_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 1.0
    cutmix_p: float = 0.5
    cutmix_area_min: float = 0.2
    cutmix_area_max: float = 0.5
    cutmix_aspect_min: float = 0.5
    cutmix_aspect_max: float = 2.0

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(flip_p=0.0, zoom_p=0.0, jitter_p=0.0, gray_p=0.0, blur_p=0.0, cutmix_p=0.0)


@dataclass
class AugRecord:
    flip: bool = False
    scale: float = 1.0
    offset: tuple[int, int] = (0, 0)
    jitter: tuple[np.ndarray, np.ndarray] | None = None
    gray: bool = False
    blur_sigma: float | None = None
    box: tuple[int, int, int, int] | None = None  # x0, y0, x1, y1 (half-open)
    partner: int | None = None


# ------------------------------------------------------------------ weak

def hflip(arr: np.ndarray) -> np.ndarray:
    return arr[..., ::-1].copy()


def weak_aug(image, label, rng: np.random.Generator, p: float = 0.5):
    """Horizontal flip with probability ``p``; returns (image, label, flipped)."""
    flip = bool(rng.random() < p)
    if flip:
        return hflip(image), hflip(label), True
    return image, label, False


# ------------------------------------------------------------------ geometry

def _zoom_index(size: int, scale: float) -> tuple[np.ndarray, np.ndarray, int]:
    scaled = max(1, int(round(size * scale)))
    off = (scaled - size) // 2
    pos = np.arange(size) + off
    valid = (pos >= 0) & (pos < scaled)
    src = np.clip(np.floor(pos * size / scaled).astype(np.int64), 0, size - 1)
    return src, valid, off


def zoom(arr: np.ndarray, scale: float, fill=None) -> np.ndarray:
    """Nearest-neighbour rescale about the centre, cropped/padded back to size.

    Zooming in centre-crops. Zooming out pads: with ``fill=None`` by edge
    replication (images), otherwise with ``fill`` (label maps).
    """
    h, w = arr.shape[-2:]
    sy, vy, _ = _zoom_index(h, scale)
    sx, vx, _ = _zoom_index(w, scale)
    out = arr[..., sy[:, None], sx[None, :]]
    if fill is not None:
        out = np.where(vy[:, None] & vx[None, :], out, fill).astype(arr.dtype)
    return out


def cutmix_box(h: int, w: int, rng: np.random.Generator, cfg: AugmentConfig) -> tuple[int, int, int, int]:
    area = rng.uniform(cfg.cutmix_area_min, cfg.cutmix_area_max) * h * w
    aspect = rng.uniform(cfg.cutmix_aspect_min, cfg.cutmix_aspect_max)
    bh = min(h, max(1, int(round(math.sqrt(area * aspect)))))
    bw = min(w, max(1, int(round(math.sqrt(area / aspect)))))
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    return x0, y0, x0 + bw, y0 + bh


def cutmix(a_image, a_label, b_image, b_label, box):
    """Pixels and labels inside ``box`` come from ``b``; everything else from ``a``."""
    x0, y0, x1, y1 = box
    image, label = a_image.copy(), a_label.copy()
    image[..., y0:y1, x0:x1] = b_image[..., y0:y1, x0:x1]
    label[..., y0:y1, x0:x1] = b_label[..., y0:y1, x0:x1]
    return image, label


def replay_geometry(rec: AugRecord, arr, partner=None, fill=IGNORE_INDEX):
    """Apply the zoom and CutMix of ``rec`` to another per-pixel map.

    ``arr`` and ``partner`` must already be in the weak (flipped) frame, the
    same frame ``strong_aug`` received.
    """
    out = zoom(arr, rec.scale, fill) if rec.scale != 1.0 else arr.copy()
    if rec.box is not None:
        x0, y0, x1, y1 = rec.box
        out[..., y0:y1, x0:x1] = partner[..., y0:y1, x0:x1]
    return out


# ------------------------------------------------------------------ photometric

def color_jitter(image, gain, shift):
    out = image.astype(np.float64) * gain[:, None, None] + shift[:, None, None]
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def grayscale(image):
    lum = np.tensordot(LUMA, image.astype(np.float64), axes=(0, 0))
    return np.broadcast_to(lum, image.shape).astype(image.dtype)


def gaussian_blur(image, sigma: float):
    return gaussian_filter(image.astype(np.float64), sigma=(0, sigma, sigma), mode="nearest").astype(image.dtype)


# ------------------------------------------------------------------ strong pipeline

def strong_aug(image, label, partner_image, partner_label, rng: np.random.Generator,
               cfg: AugmentConfig | None = None, partner_id: int | None = None):
    """zoom -> colour jitter -> grayscale -> blur -> CutMix.

    Returns (image, label, AugRecord). Photometric steps never touch labels.
    """
    cfg = cfg or AugmentConfig()
    if partner_image.shape != image.shape:
        raise ValueError("CutMix partner must have the same shape")
    rec = AugRecord()
    h, w = image.shape[-2:]
    if rng.random() < cfg.zoom_p:
        rec.scale = float(rng.uniform(cfg.scale_min, cfg.scale_max))
        image = zoom(image, rec.scale)
        label = zoom(label, rec.scale, IGNORE_INDEX)
        rec.offset = (_zoom_index(h, rec.scale)[2], _zoom_index(w, rec.scale)[2])
    if rng.random() < cfg.jitter_p:
        gain = rng.uniform(1 - cfg.jitter_gain, 1 + cfg.jitter_gain, size=3)
        shift = rng.uniform(-cfg.jitter_shift, cfg.jitter_shift, size=3)
        rec.jitter = (gain, shift)
        image = color_jitter(image, gain, shift)
    if rng.random() < cfg.gray_p:
        rec.gray = True
        image = grayscale(image)
    if rng.random() < cfg.blur_p:
        rec.blur_sigma = float(rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max))
        image = gaussian_blur(image, rec.blur_sigma)
    if rng.random() < cfg.cutmix_p:
        rec.box = cutmix_box(h, w, rng, cfg)
        rec.partner = partner_id
        image, label = cutmix(image, label, partner_image, partner_label, rec.box)
    return image, label, rec
