"""Forward/backward kernels for the handful of ops the networks need.

Every op is a pair ``<op>_forward(...) -> (out, cache)`` and
``<op>_backward(dout, cache) -> grads``. Arrays are NCHW. Convolutions run
their matrix products in the dtype of the input (float32 for training, float64
for gradient checking); reductions in the losses always run in float64.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from forec.errors import DimensionError, LabelError, MaskError

IGNORE_INDEX = 255

_pool: ThreadPoolExecutor | None = None
_pool_size = 0


def num_threads() -> int:
    """Worker count for the deterministic parallel mode (``FOREC_THREADS``, default 1)."""
    try:
        return max(1, int(os.environ.get("FOREC_THREADS", "1")))
    except ValueError:
        return 1


def _executor(n: int) -> ThreadPoolExecutor:
    global _pool, _pool_size
    if _pool is None or _pool_size != n:
        if _pool is not None:
            _pool.shutdown(wait=True)
        _pool = ThreadPoolExecutor(max_workers=n)
        _pool_size = n
    return _pool


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b``, optionally split by rows of ``a`` across worker threads.

    Each output element is still produced by one dot product over the same
    K axis, so the split never changes the reduction order.
    """
    n = num_threads()
    if n == 1 or a.shape[0] < 2 * n:
        return a @ b
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    bounds = np.linspace(0, a.shape[0], n + 1).astype(int)

    def work(i):
        lo, hi = bounds[i], bounds[i + 1]
        np.matmul(a[lo:hi], b, out=out[lo:hi])

    list(_executor(n).map(work, range(n)))
    return out


# ---------------------------------------------------------------- conv2d

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b=None, stride: int = 1, pad: int = 0):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and weight", got=(x.shape, w.shape))
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if cin != c:
        raise DimensionError(
            f"conv2d channel mismatch: input has {c}, weight expects {cin}",
            expected=cin, got=c,
        )
    if stride < 1:
        raise DimensionError("conv2d stride must be >= 1", got=stride)
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise DimensionError("conv2d kernel larger than padded input", got=(kh, kw))
    if b is not None and b.shape != (cout,):
        raise DimensionError("conv2d bias shape mismatch", expected=(cout,), got=b.shape)
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)

    xp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + wd] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = w.reshape(cout, -1).astype(x.dtype)
    out = _matmul(w2, cols).reshape(cout, n, ho, wo)
    if b is not None:
        out += b.astype(out.dtype)[:, None, None, None]
    out = out.transpose(1, 0, 2, 3).astype(x.dtype)
    cache = (cols, w2, x.shape, w.shape, x.dtype, w.dtype, b is not None, stride, pad)
    return out, cache


def conv2d_backward(dout, cache):
    """Returns ``(dx, dw, db)``; ``db`` is None when the forward had no bias."""
    cols, w2, xshape, wshape, xdtype, wdtype, has_bias, stride, pad = cache
    n, c, h, wd = xshape
    cout, cin, kh, kw = wshape
    _, _, ho, wo = dout.shape
    d2 = dout.transpose(1, 0, 2, 3).reshape(cout, -1)
    dw = _matmul(d2, cols.T).reshape(wshape).astype(wdtype)
    db = d2.sum(axis=1).astype(wdtype) if has_bias else None
    dcols = _matmul(w2.T, d2).reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=xdtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3).astype(xdtype)
    return dx, dw, db


# ---------------------------------------------------------------- relu

def relu_forward(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False), x > 0


def relu_backward(dout, cache):
    # gradient at exactly 0 is 0
    return np.where(cache, dout, 0).astype(dout.dtype, copy=False)


# ---------------------------------------------------------------- upsample

def upsample_nearest_forward(x, factor: int):
    if factor < 1:
        raise DimensionError("upsample factor must be >= 1", got=factor)
    if factor == 1:
        return x.copy(), factor
    return x.repeat(factor, axis=2).repeat(factor, axis=3), factor


def upsample_nearest_backward(dout, cache):
    f = cache
    if f == 1:
        return dout.copy()
    n, c, h, w = dout.shape
    acc = dout.astype(np.float64).reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))
    return acc.astype(dout.dtype)


# ---------------------------------------------------------------- softmax cross-entropy

def log_softmax(logits, axis: int = 1):
    z = logits.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits, axis: int = 1):
    return np.exp(log_softmax(logits, axis))


def check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    bad = (labels != IGNORE_INDEX) & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        value = int(labels[bad].flat[0])
        raise LabelError(
            f"label {value} outside [0, {num_classes}) and not the ignore value {IGNORE_INDEX}",
            value=value, num_classes=num_classes,
        )
    return labels != IGNORE_INDEX


def softmax_ce_forward(logits, labels):
    """Mean pixel cross-entropy over non-ignored pixels; 0 when nothing is valid."""
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise DimensionError("label map shape mismatch", expected=(n, h, w), got=labels.shape)
    valid = check_labels(labels, c)
    count = int(valid.sum())
    logp = log_softmax(logits)
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -picked[valid].sum() / count if count else 0.0
    return np.asarray(loss, dtype=logits.dtype), (logp, safe, valid, count, logits.dtype)


def softmax_ce_backward(dloss, cache):
    logp, safe, valid, count, dtype = cache
    if count == 0:
        return np.zeros(logp.shape, dtype=dtype)
    g = np.exp(logp)
    np.put_along_axis(g, safe[:, None], np.take_along_axis(g, safe[:, None], axis=1) - 1.0, axis=1)
    g *= valid[:, None] * (float(dloss) / count)
    return g.astype(dtype)


# ---------------------------------------------------------------- masked MSE

def masked_mse_forward(pred, target, mask):
    """Sum of squared error over masked-in pixels / (channels * masked-in pixel count)."""
    if pred.shape != target.shape:
        raise DimensionError("pred/target shape mismatch", expected=pred.shape, got=target.shape)
    n, c, h, w = pred.shape
    if mask.shape != (n, 1, h, w):
        raise DimensionError("mask must be [N,1,H,W]", expected=(n, 1, h, w), got=mask.shape)
    if not np.all((mask == 0) | (mask == 1)):
        raise MaskError("reconstruction mask must contain only 0 and 1")
    keep = mask.astype(bool)
    count = int(keep.sum())
    diff = np.where(keep, pred.astype(np.float64) - target.astype(np.float64), 0.0)
    denom = c * count
    loss = float((diff * diff).sum()) / denom if count else 0.0
    return np.asarray(loss, dtype=pred.dtype), (diff, denom, pred.dtype)


def masked_mse_backward(dloss, cache):
    """Gradient w.r.t. ``pred`` only; the target is treated as a constant."""
    diff, denom, dtype = cache
    if denom == 0:
        return np.zeros(diff.shape, dtype=dtype)
    return (diff * (2.0 * float(dloss) / denom)).astype(dtype)
