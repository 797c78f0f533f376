"""Binary checkpoint format.

Layout (little-endian)::

    b"FORECKPT"  u32 version=1  u32 tensor_count
    per tensor:  u16 name_len, utf-8 name, u8 dtype (0 = f32), u8 ndim, u32 dims[ndim], f32 payload
    u64 step     32-byte RNG state

Tensor names are ``<role>.<param>``, e.g. ``teacher.seg.out.weight``.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from forec.errors import CheckpointError, MagicError
from forec.netmodel import STUDENT, TEACHER, Network, NetworkConfig, infer_config, param_shapes

MAGIC = b"FORECKPT"
VERSION = 1
DTYPE_F32 = 0
RNG_STATE_BYTES = 32


def rng_state_bytes(rng: np.random.Generator) -> bytes:
    """Pack a PCG64 generator state (128-bit state + 128-bit increment)."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError("only PCG64 generator state can be stored")
    s = st["state"]
    return s["state"].to_bytes(16, "little") + s["inc"].to_bytes(16, "little")


def rng_from_bytes(blob: bytes) -> np.random.Generator:
    bg = np.random.PCG64()
    if any(blob):
        bg.state = {
            "bit_generator": "PCG64",
            "state": {"state": int.from_bytes(blob[:16], "little"),
                      "inc": int.from_bytes(blob[16:32], "little")},
            "has_uint32": 0, "uinteger": 0,
        }
    return np.random.Generator(bg)


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    step: int = 0
    rng_state: bytes = bytes(RNG_STATE_BYTES)
    networks: dict[str, Network] = field(default_factory=dict)

    @property
    def student(self) -> Network | None:
        return self.networks.get(STUDENT)

    @property
    def teacher(self) -> Network | None:
        return self.networks.get(TEACHER)


def encode_checkpoint(tensors: dict[str, np.ndarray], step: int = 0, rng_state: bytes | None = None) -> bytes:
    rng_state = bytes(RNG_STATE_BYTES) if rng_state is None else rng_state
    if len(rng_state) != RNG_STATE_BYTES:
        raise CheckpointError(f"RNG state must be {RNG_STATE_BYTES} bytes")
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(struct.pack("<Q", step))
    parts.append(rng_state)
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], int, bytes]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(len(MAGIC)) != MAGIC:
        raise MagicError("not a forec checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise MagicError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("tensor name is not valid utf-8") from exc
        dtype, ndim = struct.unpack("<BB", take(2))
        if dtype != DTYPE_F32:
            raise CheckpointError(f"unsupported dtype code {dtype} for {name!r}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    (step,) = struct.unpack("<Q", take(8))
    rng_state = take(RNG_STATE_BYTES)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after checkpoint payload")
    return tensors, step, rng_state


def save_checkpoint(path, networks, step: int = 0, rng_state: bytes | None = None) -> Path:
    """Write one or more networks atomically (temp file + rename)."""
    if isinstance(networks, Network):
        networks = [networks]
    tensors = {}
    for net in networks:
        for name, arr in net.params.items():
            tensors[f"{net.role}.{name}"] = arr
    blob = encode_checkpoint(tensors, step, rng_state)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, config: NetworkConfig | None = None) -> Checkpoint:
    """Read a checkpoint and rebuild the networks it holds.

    When ``config`` is given every network's shape table must match it.
    """
    tensors, step, rng_state = decode_checkpoint(Path(path).read_bytes())
    grouped: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in tensors.items():
        role, _, pname = name.partition(".")
        if role not in (STUDENT, TEACHER) or not pname:
            raise CheckpointError(f"unexpected tensor name {name!r}")
        grouped.setdefault(role, {})[pname] = arr
    networks = {}
    for role, params in grouped.items():
        shapes = {k: v.shape for k, v in params.items()}
        try:
            cfg = config or infer_config(shapes)
        except (KeyError, IndexError, ValueError) as exc:
            raise CheckpointError(f"cannot infer network layout for {role}: {exc}") from exc
        expected = param_shapes(cfg, role)
        if shapes != expected:
            missing = sorted(set(expected) - set(shapes))
            extra = sorted(set(shapes) - set(expected))
            wrong = sorted(k for k in set(shapes) & set(expected) if shapes[k] != expected[k])
            raise CheckpointError(
                f"{role} shape table does not match config: missing={missing} extra={extra} wrong={wrong}"
            )
        networks[role] = Network(cfg, role, {k: params[k] for k in expected})
    return Checkpoint(tensors, step, rng_state, networks)
