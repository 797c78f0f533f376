"""Latent images of the reconstruction decoder.

The auxiliary head ends in a bias-free 1x1 conv, so each output channel is a
weighted sum of the ``d`` maps feeding it. Those maps are the "latent images";
this module extracts them, scores how strongly each one follows the
foreground, and writes them out as PGM panels.

The foreground score (Pearson correlation of ``|slice|`` with the mask) is a
proxy chosen here; it is not a quantity defined elsewhere.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from forec.checkpoint import Checkpoint
from forec.errors import DataError, MaskError, NetworkError
from forec.netmodel import Network, forward_rec
from forec.pnm import write_pgm


@dataclass
class Latents:
    raw: np.ndarray         # [d, H, W] float64
    normalized: np.ndarray  # [d, H, W] in [0, 1]
    weights: np.ndarray     # [aux_channels, d]
    reconstruction: np.ndarray  # [aux_channels, H, W]

    @property
    def depth(self) -> int:
        return self.raw.shape[0]

    def combine(self) -> np.ndarray:
        return np.einsum("kd,dhw->khw", self.weights.astype(np.float64), self.raw)


def normalize_slices(raw) -> np.ndarray:
    """Per-slice min-max scaling; constant slices become uniform 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    lo = raw.min(axis=(-2, -1), keepdims=True)
    span = raw.max(axis=(-2, -1), keepdims=True) - lo
    flat = span == 0
    out = (raw - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, out)


def _student(source) -> Network:
    if isinstance(source, Checkpoint):
        net = source.student
        if net is None:
            raise NetworkError("checkpoint has no student network (reconstruction decoder missing)")
        source = net
    if not source.has_aux:
        raise NetworkError("network has no reconstruction decoder")
    return source


def extract_latents(source, image) -> Latents:
    """Latent slices for one image [3,H,W] from a checkpoint or student network."""
    net = _student(source)
    image = np.asarray(image)
    if image.ndim != 3:
        raise DataError(f"expected one image [3,H,W], got shape {image.shape}")
    stack, rec = forward_rec(net, image[None])
    raw = stack.z[0].astype(np.float64)
    return Latents(raw, normalize_slices(raw), stack.weights, rec[0])


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return float("nan")
    return float((a * b).sum() / denom)


def rank_by_foreground(slices, mask) -> list[tuple[int, float]]:
    """(slice index, score) pairs, best first.

    Constant slices have no defined correlation; they get score 0 and go last.
    """
    slices = np.asarray(slices, dtype=np.float64)
    mask = np.asarray(mask)
    if mask.shape != slices.shape[-2:]:
        raise MaskError(f"mask shape {mask.shape} != slice shape {slices.shape[-2:]}")
    if not np.isin(mask, (0, 1)).all():
        raise MaskError("foreground mask must be binary")
    if not mask.any():
        raise MaskError("foreground mask is empty")
    m = mask.astype(np.float64)
    scored, flat = [], []
    for k, s in enumerate(slices):
        r = _pearson(np.abs(s), m)
        if np.isnan(r):
            flat.append((k, 0.0))
        else:
            scored.append((k, r))
    scored.sort(key=lambda kv: (-kv[1], kv[0]))
    return scored + flat


def mean_topk_score(ranking, k: int = 3) -> float:
    top = [s for _, s in ranking[:k]]
    return float(np.mean(top)) if top else float("nan")


def manifest_topk_score(path, k: int = 3) -> float:
    """Mean top-k score read back from an exported ``manifest.json``."""
    doc = json.loads(Path(path).read_text())
    return mean_topk_score([(e["slice"], e["score"]) for e in doc["ranking"]], k)


def export_grid(latents: Latents, out_dir, ranking=None, topk: int | None = None) -> dict:
    """Write ``latent_kNN.pgm`` per slice and a ``manifest.json``.

    With a ranking and ``topk`` only the best ``topk`` slices are written.
    File names always use the slice index, so re-exports overwrite the same
    files with identical bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if ranking is not None:
        chosen = [k for k, _ in ranking]
    else:
        chosen = list(range(latents.depth))
    if topk is not None:
        chosen = chosen[:topk]
    files = []
    for k in chosen:
        name = f"latent_k{k:02d}.pgm"
        write_pgm(latents.normalized[k], out / name)
        files.append(name)
    manifest = {
        "depth": latents.depth,
        "files": files,
        "weights": latents.weights.astype(np.float64).tolist(),
        "ranking": [{"slice": k, "score": s} for k, s in ranking] if ranking is not None else None,
        "mean_top3_score": mean_topk_score(ranking, 3) if ranking is not None else None,
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out / "manifest.json")
    return manifest
