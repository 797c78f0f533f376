"""Central finite-difference oracle for the kernels in :mod:`forec.core.ops`."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from forec.core import ops

KINK_MARGIN = 1e-3


def grad_check(forward, backward, inputs, eps: float = 1e-3, exclude=None, seed: int = 0) -> float:
    """Max relative error between ``backward`` and central differences of ``forward``.

    ``forward(*inputs) -> (out, cache)`` and ``backward(dout, cache) -> grads``
    with one entry per input (None for non-differentiable inputs). The scalar
    probed is ``sum(out * u)`` for a fixed random upstream ``u``. Everything is
    evaluated in float64. ``exclude(k, index, inputs)`` may veto a coordinate,
    e.g. one sitting next to a relu kink. The relative error denominator is
    ``max(|a|, |b|, 1e-8)``.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    out, cache = forward(*inputs)
    out = np.asarray(out, dtype=np.float64)
    rng = np.random.default_rng(seed)
    upstream = rng.standard_normal(out.shape) if out.ndim else np.float64(1.0)
    analytic = backward(np.asarray(upstream, dtype=np.float64), cache)

    def probe(xs):
        o, _ = forward(*xs)
        return float(np.sum(np.asarray(o, dtype=np.float64) * upstream))

    worst = 0.0
    for k, x in enumerate(inputs):
        a = analytic[k]
        if a is None:
            continue
        a = np.asarray(a, dtype=np.float64)
        for idx in np.ndindex(x.shape):
            if exclude is not None and exclude(k, idx, inputs):
                continue
            orig = x[idx]
            x[idx] = orig + eps
            fp = probe(inputs)
            x[idx] = orig - eps
            fm = probe(inputs)
            x[idx] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(num - a[idx]) / max(abs(num), abs(a[idx]), 1e-8)
            worst = max(worst, err)
    return worst


@dataclass
class OpCase:
    """A random differentiable configuration for one op."""

    forward: Callable
    backward: Callable
    inputs: list
    exclude: Callable | None = None


def _conv_case(rng):
    n = int(rng.integers(1, 3))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(3, 8)), int(rng.integers(3, 8))
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, 2)) if k == 3 else 0
    use_bias = bool(rng.integers(0, 2))
    x = rng.standard_normal((n, cin, h, w))
    wt = rng.standard_normal((cout, cin, k, k))
    if use_bias:
        b = rng.standard_normal(cout)
        return OpCase(
            lambda x, wt, b: ops.conv2d_forward(x, wt, b, stride, pad),
            ops.conv2d_backward,
            [x, wt, b],
        )
    return OpCase(
        lambda x, wt: ops.conv2d_forward(x, wt, None, stride, pad),
        lambda d, c: ops.conv2d_backward(d, c)[:2],
        [x, wt],
    )


def _relu_case(rng):
    shape = tuple(int(s) for s in rng.integers(1, 5, size=4))
    x = rng.standard_normal(shape)
    return OpCase(
        ops.relu_forward,
        lambda d, c: (ops.relu_backward(d, c),),
        [x],
        exclude=lambda k, idx, xs: abs(xs[k][idx]) < KINK_MARGIN,
    )


def _upsample_case(rng):
    shape = tuple(int(s) for s in rng.integers(1, 4, size=4))
    f = int(rng.choice([1, 2, 3]))
    return OpCase(
        lambda x: ops.upsample_nearest_forward(x, f),
        lambda d, c: (ops.upsample_nearest_backward(d, c),),
        [rng.standard_normal(shape)],
    )


def _softmax_ce_case(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(2, 5))
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    logits = 2.0 * rng.standard_normal((n, c, h, w))
    labels = rng.integers(0, c, size=(n, h, w))
    labels[rng.random((n, h, w)) < 0.2] = ops.IGNORE_INDEX
    return OpCase(
        lambda z: ops.softmax_ce_forward(z, labels),
        lambda d, cache: (ops.softmax_ce_backward(d, cache),),
        [logits],
    )


def _masked_mse_case(rng):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    target = rng.random((n, c, h, w))
    mask = (rng.random((n, 1, h, w)) < 0.6).astype(np.float64)
    return OpCase(
        lambda p: ops.masked_mse_forward(p, target, mask),
        lambda d, cache: (ops.masked_mse_backward(d, cache),),
        [rng.standard_normal((n, c, h, w))],
    )


CASES: dict[str, Callable] = {
    "conv2d": _conv_case,
    "relu": _relu_case,
    "upsample_nearest": _upsample_case,
    "softmax_ce": _softmax_ce_case,
    "masked_mse": _masked_mse_case,
}


def run_suite(names=None, trials: int = 20, seed: int = 0, eps: float = 1e-3) -> dict[str, float]:
    """Worst relative error per op over ``trials`` random configurations."""
    names = list(CASES) if names is None else list(names)
    results = {}
    for name in names:
        rng = np.random.default_rng([seed, sorted(CASES).index(name)])
        worst = 0.0
        for t in range(trials):
            case = CASES[name](rng)
            worst = max(worst, grad_check(case.forward, case.backward, case.inputs, eps,
                                          case.exclude, seed=t))
        results[name] = float(worst)
    return results
