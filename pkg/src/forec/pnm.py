"""Binary PPM (P6) / PGM (P5) reading and writing, maxval 255 only."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from forec.errors import ImageFormatError


def _quantize(values: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def encode_pnm(magic: bytes, pixels: np.ndarray) -> bytes:
    h, w = pixels.shape[:2]
    return b"%s\n%d %d\n255\n" % (magic, w, h) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def decode_pnm(blob: bytes, expect: bytes) -> np.ndarray:
    """Parse a P5/P6 file; returns uint8 [H,W] or [H,W,3]."""
    pos = 0
    fields = []
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            end = blob.find(b"\n", pos)
            pos = len(blob) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed header: unexpected end of file")
        fields.append(blob[start:pos])
    if fields[0] != expect:
        raise ImageFormatError(f"expected {expect.decode()} file, found {fields[0][:2]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ImageFormatError("malformed header: non-integer field") from exc
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"invalid image size {w}x{h}")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}; only 255 is allowed")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise ImageFormatError("malformed header: missing separator before payload")
    pos += 1
    channels = 3 if expect == b"P6" else 1
    size = w * h * channels
    payload = blob[pos:pos + size]
    if len(payload) < size:
        raise ImageFormatError(f"truncated payload: {len(payload)} of {size} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_ppm(image, path) -> None:
    """Write a [3,H,W] float image; values clamped to [0,1] and rounded to 1/255 steps."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ImageFormatError(f"expected a [3,H,W] image, got {image.shape}")
    Path(path).write_bytes(encode_pnm(b"P6", _quantize(image).transpose(1, 2, 0)))


def read_ppm(path) -> np.ndarray:
    """Read a P6 file as a float32 [3,H,W] array with values p/255."""
    px = decode_pnm(Path(path).read_bytes(), b"P6")
    return (px.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def write_pgm(values, path) -> None:
    """Write a float [H,W] map in [0,1] (e.g. a latent slice) as 8-bit gray."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ImageFormatError(f"expected a [H,W] map, got {values.shape}")
    Path(path).write_bytes(encode_pnm(b"P5", _quantize(values)))


def read_pgm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes(), b"P5").astype(np.float32) / np.float32(255.0)


def write_label_pgm(labels, path) -> None:
    """Write an integer label map verbatim (class ids, 255 = ignore)."""
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ImageFormatError("label map must be [H,W] with values in [0,255]")
    Path(path).write_bytes(encode_pnm(b"P5", labels.astype(np.uint8)))


def read_label_pgm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes(), b"P5").copy()
