"""Reverse-mode recording of the ops in :mod:`forec.core.ops`."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from forec.core import ops


class Node:
    """A value produced on a tape, plus its accumulated gradient."""

    __slots__ = ("value", "grad", "name", "requires_grad")

    def __init__(self, value: np.ndarray, name: str | None = None, requires_grad: bool = True):
        self.value = value
        self.grad: np.ndarray | None = None
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.name or '?'}, shape={self.value.shape})"


@dataclass
class OpRecord:
    kind: str
    inputs: tuple
    output: Node
    cache: object
    backward: Callable


@dataclass
class Tape:
    """Ordered op log. With ``enabled=False`` nothing is recorded (inference)."""

    enabled: bool = True
    records: list[OpRecord] = field(default_factory=list)

    def leaf(self, value, name=None, requires_grad=True) -> Node:
        return Node(np.asarray(value), name, requires_grad and self.enabled)

    def constant(self, value, name=None) -> Node:
        return Node(np.asarray(value), name, requires_grad=False)

    def _record(self, kind, inputs, out_value, cache, backward) -> Node:
        needs = self.enabled and any(n is not None and n.requires_grad for n in inputs)
        out = Node(out_value, kind, requires_grad=needs)
        if needs:
            self.records.append(OpRecord(kind, tuple(inputs), out, cache, backward))
        return out

    # ops ---------------------------------------------------------------

    def conv2d(self, x: Node, w: Node, b: Node | None = None, stride=1, pad=0) -> Node:
        out, cache = ops.conv2d_forward(x.value, w.value, None if b is None else b.value, stride, pad)
        return self._record("conv2d", (x, w, b), out, cache, ops.conv2d_backward)

    def relu(self, x: Node) -> Node:
        out, cache = ops.relu_forward(x.value)
        return self._record("relu", (x,), out, cache, lambda d, c: (ops.relu_backward(d, c),))

    def upsample(self, x: Node, factor: int) -> Node:
        out, cache = ops.upsample_nearest_forward(x.value, factor)
        return self._record(
            "upsample", (x,), out, cache, lambda d, c: (ops.upsample_nearest_backward(d, c),)
        )

    def softmax_ce(self, logits: Node, labels) -> Node:
        out, cache = ops.softmax_ce_forward(logits.value, labels)
        return self._record(
            "softmax_ce", (logits,), out, cache, lambda d, c: (ops.softmax_ce_backward(d, c),)
        )

    def masked_mse(self, pred: Node, target, mask) -> Node:
        out, cache = ops.masked_mse_forward(pred.value, target, mask)
        return self._record(
            "masked_mse", (pred,), out, cache, lambda d, c: (ops.masked_mse_backward(d, c),)
        )

    # backward ----------------------------------------------------------

    def backward(self, seeds) -> None:
        """Propagate from ``seeds``: a Node (seeded with 1) or ``[(node, weight), ...]``.

        Records are visited in exact reverse execution order.
        """
        if isinstance(seeds, Node):
            seeds = [(seeds, 1.0)]
        for node, weight in seeds:
            if not node.requires_grad:
                continue
            g = np.full(node.value.shape, weight, dtype=node.value.dtype)
            node.grad = g if node.grad is None else node.grad + g
        for rec in reversed(self.records):
            if rec.output.grad is None:
                continue
            grads = rec.backward(rec.output.grad, rec.cache)
            for node, g in zip(rec.inputs, grads):
                if node is None or g is None or not node.requires_grad:
                    continue
                node.grad = g if node.grad is None else node.grad + g
