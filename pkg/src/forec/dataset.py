"""Synthetic shapes dataset, on-disk layout, label partitions and batch sampling."""
from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from forec.core.ops import IGNORE_INDEX
from forec.errors import DataError
from forec.pnm import read_label_pgm, read_ppm, write_label_pgm, write_ppm

MASK64 = (1 << 64) - 1
SHAPE_NAMES = {
    1: "circle", 2: "rectangle", 3: "triangle", 4: "rotated rectangle",
    5: "rotated triangle", 6: "ellipse", 7: "diamond", 8: "inverted triangle",
}
PIXEL_NOISE = 0.02


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def image_seed(master_seed: int, image_id: int) -> int:
    return splitmix64((master_seed ^ image_id) & MASK64)


@dataclass
class Dataset:
    images: np.ndarray            # float32 [N,3,H,W] in [0,1]
    labels: np.ndarray            # uint8 [N,H,W]
    ids: np.ndarray               # int64 [N]
    num_classes: int              # including background
    seed: int = 0
    train_ids: list[int] = field(default_factory=list)
    val_ids: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def index_of(self, ids) -> np.ndarray:
        lookup = {int(i): k for k, i in enumerate(self.ids)}
        return np.array([lookup[int(i)] for i in ids], dtype=np.int64)

    def take(self, ids) -> tuple[np.ndarray, np.ndarray]:
        idx = self.index_of(ids)
        return self.images[idx], self.labels[idx]


# ------------------------------------------------------------------ generation

def _smooth_background(rng, h, w) -> np.ndarray:
    grid = rng.uniform(0.15, 0.85, size=(3, 5, 5))
    ys = np.linspace(0, 4, h)
    xs = np.linspace(0, 4, w)
    y0 = np.minimum(ys.astype(int), 3)
    x0 = np.minimum(xs.astype(int), 3)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g = grid
    top = g[:, y0][:, :, x0] * (1 - fx) + g[:, y0][:, :, x0 + 1] * fx
    bot = g[:, y0 + 1][:, :, x0] * (1 - fx) + g[:, y0 + 1][:, :, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _polygon_mask(yy, xx, pts) -> np.ndarray:
    """Convex polygon fill; ``pts`` is a list of (y, x) vertices."""
    inside = np.ones(yy.shape, dtype=bool)
    sign = None
    n = len(pts)
    for k in range(n):
        (y1, x1), (y2, x2) = pts[k], pts[(k + 1) % n]
        cross = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
        if sign is None:
            cy = sum(p[0] for p in pts) / n
            cx = sum(p[1] for p in pts) / n
            sign = np.sign((x2 - x1) * (cy - y1) - (y2 - y1) * (cx - x1))
        inside &= cross * sign >= 0
    return inside


def _rotate(pts, cy, cx, angle):
    c, s = math.cos(angle), math.sin(angle)
    return [(cy + (y - cy) * c - (x - cx) * s, cx + (y - cy) * s + (x - cx) * c) for y, x in pts]


def _shape_mask(cls: int, rng, h, w) -> np.ndarray:
    scale = min(h, w) / 64.0
    size = rng.uniform(6.0, 12.0) * scale
    margin = size + 1
    cy = rng.uniform(margin, h - 1 - margin)
    cx = rng.uniform(margin, w - 1 - margin)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if cls == 1:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size ** 2
    if cls == 6:
        a, b = size, size * rng.uniform(0.45, 0.7)
        t = rng.uniform(0, math.pi)
        u = (yy - cy) * math.cos(t) + (xx - cx) * math.sin(t)
        v = -(yy - cy) * math.sin(t) + (xx - cx) * math.cos(t)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if cls in (2, 4, 7):
        hy = size * rng.uniform(0.6, 1.0)
        hx = size * rng.uniform(0.6, 1.0)
        pts = [(cy - hy, cx - hx), (cy - hy, cx + hx), (cy + hy, cx + hx), (cy + hy, cx - hx)]
        if cls == 4:
            pts = _rotate(pts, cy, cx, rng.uniform(math.pi / 9, 7 * math.pi / 18))
        elif cls == 7:
            pts = _rotate(pts, cy, cx, math.pi / 4)
        return _polygon_mask(yy, xx, pts)
    # triangles: upright isosceles, rotated or inverted
    pts = [(cy - size, cx), (cy + size * 0.8, cx - size), (cy + size * 0.8, cx + size)]
    if cls == 5:
        pts = _rotate(pts, cy, cx, rng.uniform(math.pi / 2, 3 * math.pi / 2))
    elif cls == 8:
        pts = _rotate(pts, cy, cx, math.pi)
    return _polygon_mask(yy, xx, pts)


def render_image(image_id: int, h: int, w: int, num_object_classes: int, master_seed: int):
    """Render one image and its label map from its own derived seed."""
    rng = np.random.default_rng(image_seed(master_seed, image_id))
    # pixel noise textures the background only; shapes are flat solid fills
    image = _smooth_background(rng, h, w) + rng.normal(0.0, PIXEL_NOISE, size=(3, h, w))
    label = np.zeros((h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    wanted = int(rng.integers(1, 4))
    placed = 0
    for _ in range(50):
        if placed == wanted:
            break
        cls = int(rng.integers(1, num_object_classes + 1))
        mask = _shape_mask(cls, rng, h, w)
        grown = mask.copy()
        grown[1:] |= mask[:-1]
        grown[:-1] |= mask[1:]
        grown[:, 1:] |= mask[:, :-1]
        grown[:, :-1] |= mask[:, 1:]
        if mask.sum() < 9 or (grown & occupied).any():
            continue
        color = rng.uniform(0.0, 1.0, size=3)
        image[:, mask] = color[:, None]
        label[mask] = cls
        occupied |= mask
        placed += 1
    if placed == 0:  # practically unreachable; keep the contract anyway
        cy, cx = h // 2, w // 2
        label[cy - 4:cy + 4, cx - 4:cx + 4] = 2
        image[:, cy - 4:cy + 4, cx - 4:cx + 4] = rng.uniform(0.0, 1.0, size=(3, 1, 1))
    return np.clip(image, 0.0, 1.0).astype(np.float32), label


def gen_shapes(count: int, height: int = 64, width: int = 64, num_object_classes: int = 3,
               seed: int = 0, first_id: int = 0) -> Dataset:
    if height < 32 or width < 32:
        raise ValueError("images must be at least 32x32")
    if not 1 <= num_object_classes <= 8:
        raise ValueError("num_object_classes must be in [1, 8]")
    ids = np.arange(first_id, first_id + count, dtype=np.int64)
    images = np.empty((count, 3, height, width), dtype=np.float32)
    labels = np.empty((count, height, width), dtype=np.uint8)
    for k, i in enumerate(ids):
        images[k], labels[k] = render_image(int(i), height, width, num_object_classes, seed)
    return Dataset(images, labels, ids, num_object_classes + 1, seed)


def make_dataset(train_count=256, val_count=64, height=64, width=64, num_object_classes=3, seed=0) -> Dataset:
    """Train ids come first, validation ids are the last ``val_count``."""
    ds = gen_shapes(train_count + val_count, height, width, num_object_classes, seed)
    ds.train_ids = [int(i) for i in ds.ids[:train_count]]
    ds.val_ids = [int(i) for i in ds.ids[train_count:]]
    return ds


# ------------------------------------------------------------------ disk layout

def save_dataset(ds: Dataset, out_dir, extra_meta: dict | None = None) -> Path:
    """Write images/NNNN.ppm, labels/NNNN.pgm and meta.json via a temp dir + rename."""
    out_dir = Path(out_dir)
    if out_dir.exists():
        raise DataError(f"output directory {out_dir} already exists")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out_dir.parent, prefix=f".{out_dir.name}-"))
    try:
        (tmp / "images").mkdir()
        (tmp / "labels").mkdir()
        for k, i in enumerate(ds.ids):
            write_ppm(ds.images[k], tmp / "images" / f"{int(i):04d}.ppm")
            write_label_pgm(ds.labels[k], tmp / "labels" / f"{int(i):04d}.pgm")
        meta = {
            "count": len(ds),
            "train_count": len(ds.train_ids),
            "val_count": len(ds.val_ids),
            "height": int(ds.images.shape[2]),
            "width": int(ds.images.shape[3]),
            "num_classes": ds.num_classes,
            "classes": ["background"] + [SHAPE_NAMES[c] for c in range(1, ds.num_classes)],
            "seed": ds.seed,
            "train_ids": ds.train_ids,
            "val_ids": ds.val_ids,
        }
        meta.update(extra_meta or {})
        (tmp / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


def load_dataset(path) -> Dataset:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"{path} is not a dataset directory (missing meta.json)")
    meta = json.loads(meta_path.read_text())
    ids = meta["train_ids"] + meta["val_ids"]
    images = np.stack([read_ppm(path / "images" / f"{i:04d}.ppm") for i in ids])
    labels = np.stack([read_label_pgm(path / "labels" / f"{i:04d}.pgm") for i in ids])
    return Dataset(images, labels, np.asarray(ids, dtype=np.int64), int(meta["num_classes"]),
                   int(meta.get("seed", 0)), list(meta["train_ids"]), list(meta["val_ids"]))


# ------------------------------------------------------------------ partitions

@dataclass(frozen=True)
class Partition:
    labeled: tuple[int, ...]
    unlabeled: tuple[int, ...]
    val: tuple[int, ...]
    ratio: str

    def __post_init__(self):
        sets = [set(self.labeled), set(self.unlabeled), set(self.val)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataError("partition id sets overlap")


def fraction_tag(fraction: float) -> str:
    f = Fraction(fraction).limit_denominator(1024)
    return str(f.numerator) if f.denominator == 1 else f"{f.numerator}/{f.denominator}"


def partition(ds: Dataset, labeled_fraction: float, seed: int) -> Partition:
    if not 0 < labeled_fraction <= 1:
        raise DataError("labeled fraction must lie in (0, 1]")
    train = np.asarray(ds.train_ids, dtype=np.int64)
    n_lab = math.ceil(labeled_fraction * len(train) - 1e-9)
    if n_lab == 0:
        raise DataError("labeled fraction yields no labeled samples")
    order = np.random.default_rng(seed).permutation(len(train))
    shuffled = train[order]
    return Partition(
        tuple(int(i) for i in shuffled[:n_lab]),
        tuple(int(i) for i in shuffled[n_lab:]),
        tuple(int(i) for i in ds.val_ids),
        fraction_tag(labeled_fraction),
    )


# ------------------------------------------------------------------ sampling

class PoolSampler:
    """Epoch-shuffled draws without replacement; uniform with replacement if the pool < b."""

    def __init__(self, ids, b: int, rng: np.random.Generator):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.b = b
        self.rng = rng
        self._queue = np.empty(0, dtype=np.int64)

    def draw(self) -> np.ndarray:
        if len(self.ids) == 0:
            raise DataError("cannot sample from an empty pool")
        if len(self.ids) < self.b:
            return self.ids[self.rng.integers(0, len(self.ids), size=self.b)]
        if len(self._queue) < self.b:
            self._queue = self.rng.permutation(self.ids)
        out, self._queue = self._queue[:self.b], self._queue[self.b:]
        return out


class BatchSampler:
    """Draws ``b`` labeled and ``b`` unlabeled ids per step."""

    def __init__(self, part: Partition, b: int, rng: np.random.Generator, use_unlabeled: bool = True):
        if not part.labeled:
            raise DataError("labeled pool is empty")
        if use_unlabeled and not part.unlabeled:
            raise DataError("unlabeled pool is empty in semi-supervised mode")
        self.labeled = PoolSampler(part.labeled, b, rng)
        self.unlabeled = PoolSampler(part.unlabeled, b, rng) if use_unlabeled else None

    def sample(self) -> tuple[np.ndarray, np.ndarray | None]:
        lab = self.labeled.draw()
        unl = self.unlabeled.draw() if self.unlabeled is not None else None
        return lab, unl


def sample_batch(part: Partition, b: int, rng: np.random.Generator):
    """One-off draw of (labeled ids, unlabeled ids); use BatchSampler across steps."""
    return BatchSampler(part, b, rng).sample()
