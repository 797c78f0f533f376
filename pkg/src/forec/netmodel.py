"""Student/teacher segmentation networks with an auxiliary image decoder.

Architecture (all convs 3x3 pad 1 unless noted):

    encoder  per stage s: conv stride 2 -> relu -> conv -> relu   width base * 2**s
    decoder  per stage:   upsample x2 -> conv -> relu              mirrors the encoder
    head     1x1 conv to C classes (seg) or to 3 channels, no bias (rec)

The reconstruction decoder ``rec`` has the same shape as the segmentation
decoder ``seg`` except for its last layer. The teacher carries ``enc`` and
``seg`` only.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from forec.core.tape import Node, Tape
from forec.errors import DimensionError, NetworkError

STUDENT = "student"
TEACHER = "teacher"


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    num_classes: int = 4
    base_width: int = 16
    stages: int = 2
    latent_width: int = 16
    aux_channels: int = 3  # 3 for image reconstruction, 2 for the fg/bg head

    def __post_init__(self):
        if self.latent_width < 1:
            raise ValueError("latent_width must be >= 1")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def encoder_width(self, stage: int) -> int:
        return self.base_width * 2 ** stage

    def decoder_widths(self) -> list[tuple[int, int]]:
        """(in, out) channels of each decoder stage, coarse to fine."""
        widths = []
        for t in range(self.stages):
            cin = self.encoder_width(self.stages - 1 - t)
            cout = self.latent_width if t == self.stages - 1 else self.encoder_width(self.stages - 2 - t)
            widths.append((cin, cout))
        return widths


def param_shapes(config: NetworkConfig, role: str = STUDENT) -> dict[str, tuple]:
    """Ordered parameter table for a network of the given role."""
    shapes: dict[str, tuple] = {}
    cin = config.in_channels
    for s in range(config.stages):
        w = config.encoder_width(s)
        shapes[f"enc.{s}.0.weight"] = (w, cin, 3, 3)
        shapes[f"enc.{s}.0.bias"] = (w,)
        shapes[f"enc.{s}.1.weight"] = (w, w, 3, 3)
        shapes[f"enc.{s}.1.bias"] = (w,)
        cin = w
    heads = ["seg", "rec"] if role == STUDENT else ["seg"]
    for head in heads:
        for t, (ci, co) in enumerate(config.decoder_widths()):
            shapes[f"{head}.{t}.weight"] = (co, ci, 3, 3)
            shapes[f"{head}.{t}.bias"] = (co,)
    shapes["seg.out.weight"] = (config.num_classes, config.latent_width, 1, 1)
    shapes["seg.out.bias"] = (config.num_classes,)
    if role == STUDENT:
        shapes["rec.out.weight"] = (config.aux_channels, config.latent_width, 1, 1)
    return dict(sorted(shapes.items(), key=lambda kv: _order_key(kv[0])))


def _order_key(name: str):
    head = {"enc": 0, "seg": 1, "rec": 2}[name.split(".")[0]]
    return head, name


@dataclass
class Network:
    config: NetworkConfig
    role: str
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def has_aux(self) -> bool:
        return "rec.out.weight" in self.params

    def copy(self) -> "Network":
        return Network(self.config, self.role, {k: v.copy() for k, v in self.params.items()})

    def bind(self, tape: Tape) -> dict[str, Node]:
        return {k: tape.leaf(v, name=k) for k, v in self.params.items()}


def build(config: NetworkConfig, seed: int) -> tuple[Network, Network]:
    """Fan-in scaled uniform weights, zero biases; the teacher copies the student."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config, STUDENT).items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    student = Network(config, STUDENT, params)
    teacher_names = param_shapes(config, TEACHER)
    teacher = Network(config, TEACHER, {k: params[k].copy() for k in teacher_names})
    return student, teacher


def _check_input(net: Network, x: np.ndarray):
    if x.ndim != 4 or x.shape[1] != net.config.in_channels:
        raise DimensionError("input must be [N, in_channels, H, W]", got=x.shape)
    div = 2 ** net.config.stages
    if x.shape[2] % div or x.shape[3] % div:
        raise DimensionError(f"spatial dims must be divisible by {div}", expected=div, got=x.shape[2:])


def encode(tape: Tape, p: dict[str, Node], x: Node, stages: int) -> Node:
    h = x
    for s in range(stages):
        h = tape.relu(tape.conv2d(h, p[f"enc.{s}.0.weight"], p[f"enc.{s}.0.bias"], stride=2, pad=1))
        h = tape.relu(tape.conv2d(h, p[f"enc.{s}.1.weight"], p[f"enc.{s}.1.bias"], stride=1, pad=1))
    return h


def decode(tape: Tape, p: dict[str, Node], feat: Node, head: str, stages: int) -> tuple[Node, Node]:
    """Returns (latent Z before the 1x1 head, head output)."""
    h = feat
    for t in range(stages):
        h = tape.upsample(h, 2)
        h = tape.relu(tape.conv2d(h, p[f"{head}.{t}.weight"], p[f"{head}.{t}.bias"], stride=1, pad=1))
    out = tape.conv2d(h, p[f"{head}.out.weight"], p.get(f"{head}.out.bias"), stride=1, pad=0)
    return h, out


def forward(net: Network, x, tape: Tape | None = None, heads=("seg",), nodes=None) -> dict[str, Node]:
    """Run the shared encoder once and the requested heads on it.

    Returns Nodes keyed ``feat``, ``seg``, ``seg_z``, ``rec``, ``rec_z``.
    """
    x = np.asarray(x)
    if x.dtype != np.float64:
        x = x.astype(np.float32, copy=False)
    _check_input(net, x)
    if "rec" in heads and not net.has_aux:
        raise NetworkError("the teacher network has no reconstruction decoder")
    tape = tape or Tape(enabled=False)
    p = nodes if nodes is not None else net.bind(tape)
    out = {"feat": encode(tape, p, tape.constant(x - x.dtype.type(0.5)), net.config.stages)}
    for head in heads:
        z, y = decode(tape, p, out["feat"], head, net.config.stages)
        out[head], out[f"{head}_z"] = y, z
    return out


def forward_seg(net: Network, x) -> np.ndarray:
    return forward(net, x)["seg"].value


@dataclass
class LatentStack:
    """Latent images Z [N,d,H,W] and the head weights [out_channels, d]."""

    z: np.ndarray
    weights: np.ndarray

    def combine(self) -> np.ndarray:
        """Weighted sum of latent slices per output channel, in float64."""
        return np.einsum("ck,nkhw->nchw", self.weights.astype(np.float64), self.z.astype(np.float64))


def forward_rec(net: Network, x) -> tuple[LatentStack, np.ndarray]:
    out = forward(net, x, heads=("rec",))
    w = net.params["rec.out.weight"][:, :, 0, 0]
    return LatentStack(out["rec_z"].value, w.copy()), out["rec"].value


def ema_update(teacher: Network, student: Network, alpha: float) -> Network:
    """``teacher <- alpha * teacher + (1 - alpha) * student`` over shared parameters."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    for name, t in teacher.params.items():
        s = student.params.get(name)
        if s is None or s.shape != t.shape:
            raise DimensionError(f"EMA shape mismatch for {name!r}", expected=t.shape,
                                 got=None if s is None else s.shape)
        mixed = alpha * t.astype(np.float64) + (1.0 - alpha) * s.astype(np.float64)
        teacher.params[name] = mixed.astype(t.dtype)
    return teacher


def infer_config(shapes: dict[str, tuple], in_channels: int = 3) -> NetworkConfig:
    """Recover a NetworkConfig from a parameter shape table."""
    stages = len({k.split(".")[1] for k in shapes if k.startswith("enc.")})
    base = shapes["enc.0.0.weight"][0]
    seg_out = shapes["seg.out.weight"]
    aux = shapes.get("rec.out.weight", (3,))[0]
    return NetworkConfig(
        in_channels=shapes["enc.0.0.weight"][1], num_classes=seg_out[0], base_width=base,
        stages=stages, latent_width=seg_out[1], aux_channels=aux,
    )


def with_aux(config: NetworkConfig, aux_channels: int) -> NetworkConfig:
    return replace(config, aux_channels=aux_channels)
