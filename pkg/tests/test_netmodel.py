import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forec.checkpoint import (MAGIC, encode_checkpoint, load_checkpoint, rng_from_bytes, rng_state_bytes,
                              save_checkpoint)
from forec.core.tape import Tape
from forec.errors import CheckpointError, DimensionError, MagicError, NetworkError
from forec.netmodel import (NetworkConfig, build, ema_update, forward, forward_rec, forward_seg,
                            param_shapes)


def test_teacher_starts_as_copy(nets):
    student, teacher = nets
    assert set(teacher.params) < set(student.params)
    for name, value in teacher.params.items():
        assert value.tobytes() == student.params[name].tobytes()
        assert value is not student.params[name]


def test_same_seed_same_parameters():
    a, _ = build(NetworkConfig(), 3)
    b, _ = build(NetworkConfig(), 3)
    c, _ = build(NetworkConfig(), 4)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params)


def test_heads_differ_only_in_last_layer():
    shapes = param_shapes(NetworkConfig(num_classes=4, latent_width=16))
    assert shapes["seg.out.weight"] == (4, 16, 1, 1)
    assert shapes["rec.out.weight"] == (3, 16, 1, 1)
    assert "rec.out.bias" not in shapes
    seg = {k[4:]: v for k, v in shapes.items() if k.startswith("seg.") and ".out." not in k}
    rec = {k[4:]: v for k, v in shapes.items() if k.startswith("rec.") and ".out." not in k}
    assert seg == rec


def test_teacher_has_no_reconstruction_decoder(nets):
    _, teacher = nets
    assert not any(k.startswith("rec.") for k in teacher.params)
    with pytest.raises(NetworkError):
        forward_rec(teacher, np.zeros((1, 3, 8, 8), np.float32))


def test_forward_seg_shape_and_determinism(nets, rng):
    student, _ = nets
    x = rng.random((2, 3, 16, 12)).astype(np.float32)
    a = forward_seg(student, x)
    assert a.shape == (2, 4, 16, 12)
    assert a.tobytes() == forward_seg(student, x).tobytes()


def test_indivisible_input_rejected(nets):
    with pytest.raises(DimensionError):
        forward_seg(nets[0], np.zeros((1, 3, 10, 8), np.float32))


def test_one_pixel_descent(nets, rng):
    student, _ = nets
    x = rng.random((1, 3, 8, 8)).astype(np.float32)
    labels = np.full((1, 8, 8), 255)
    labels[0, 3, 4] = 2

    def loss_and_grads():
        tape = Tape()
        nodes = student.bind(tape)
        loss = tape.softmax_ce(forward(student, x, tape, ("seg",), nodes)["seg"], labels)
        tape.backward(loss)
        return float(loss.value), {k: n.grad for k, n in nodes.items() if n.grad is not None}

    before, grads = loss_and_grads()
    for k, g in grads.items():
        student.params[k] = student.params[k] - 1e-3 * g
    after, _ = loss_and_grads()
    assert after < before


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_latent_weighted_sum_reproduces_reconstruction(seed):
    rng = np.random.default_rng(seed)
    student, _ = build(NetworkConfig(base_width=8, latent_width=6), seed % 1000)
    latents, rec = forward_rec(student, rng.random((2, 3, 16, 16)).astype(np.float32))
    assert rec.shape == (2, 3, 16, 16) and np.isfinite(rec).all()
    assert np.abs(latents.combine() - rec).max() <= 1e-5


def test_single_latent_slice_equals_output():
    student, _ = build(NetworkConfig(latent_width=1, base_width=4), 0)
    student.params["rec.out.weight"] = np.ones((3, 1, 1, 1), np.float32)
    latents, rec = forward_rec(student, np.random.default_rng(0).random((1, 3, 8, 8)).astype(np.float32))
    for c in range(3):
        assert rec[:, c].tobytes() == latents.z[:, 0].tobytes()


def test_encoder_shared_between_heads(nets, rng):
    student, _ = nets
    x = rng.random((1, 3, 8, 8)).astype(np.float32)
    tape = Tape()
    out = forward(student, x, tape, ("seg", "rec"))
    conv_inputs = [r.inputs[0] for r in tape.records if r.kind == "upsample"]
    assert conv_inputs[0] is out["feat"]
    assert sum(1 for node in conv_inputs if node is out["feat"]) == 2


# ---------------------------------------------------------------- EMA

def test_ema_extremes(nets):
    student, teacher = nets
    student.params = {k: v + 1.0 for k, v in student.params.items()}
    before = {k: v.copy() for k, v in teacher.params.items()}
    ema_update(teacher, student, 1.0)
    assert all(teacher.params[k].tobytes() == before[k].tobytes() for k in before)
    ema_update(teacher, student, 0.0)
    assert all(teacher.params[k].tobytes() == student.params[k].tobytes() for k in before)


def test_ema_arithmetic(nets):
    student, teacher = nets
    teacher.params = {k: np.ones_like(v) for k, v in teacher.params.items()}
    student.params = {k: np.zeros_like(v) for k, v in student.params.items()}
    ema_update(teacher, student, 0.99)
    assert all(np.allclose(v, 0.99, rtol=0, atol=1e-7) for v in teacher.params.values())


def test_ema_leaves_rec_untouched_and_checks_shapes(nets):
    student, teacher = nets
    rec = student.params["rec.0.weight"].copy()
    ema_update(teacher, student, 0.5)
    assert student.params["rec.0.weight"].tobytes() == rec.tobytes()
    student.params["seg.out.bias"] = np.zeros(7, np.float32)
    with pytest.raises(DimensionError):
        ema_update(teacher, student, 0.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 1.0))
def test_ema_convexity_and_contraction(seed, alpha):
    rng = np.random.default_rng(seed)
    student, teacher = build(NetworkConfig(base_width=2, latent_width=2, stages=1), 0)
    teacher.params = {k: rng.standard_normal(v.shape).astype(np.float32) for k, v in teacher.params.items()}
    old = {k: v.copy() for k, v in teacher.params.items()}
    ema_update(teacher, student, alpha)
    for k, t in teacher.params.items():
        lo = np.minimum(old[k], student.params[k])
        hi = np.maximum(old[k], student.params[k])
        assert ((t >= lo) & (t <= hi)).all()
        gap_old = np.abs(old[k].astype(np.float64) - student.params[k])
        gap_new = np.abs(t.astype(np.float64) - student.params[k])
        assert (gap_new <= alpha * gap_old + 1e-6).all()


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, nets):
    student, teacher = nets
    rng = np.random.default_rng(9)
    rng.random(3)
    path = save_checkpoint(tmp_path / "a.ckpt", [student, teacher], step=123, rng_state=rng_state_bytes(rng))
    ck = load_checkpoint(path)
    assert ck.step == 123
    for net in (student, teacher):
        loaded = ck.networks[net.role]
        assert loaded.config == net.config
        assert list(loaded.params) == list(net.params)
        assert all(loaded.params[k].tobytes() == v.tobytes() for k, v in net.params.items())
    assert rng_from_bytes(ck.rng_state).random() == rng.random()


def test_checkpoint_tensor_count_matches_architecture(tmp_path):
    student, teacher = build(NetworkConfig(), 0)
    # 2 stages x 2 convs x (w, b) in the encoder, 2 x (w, b) + head (w, b) for seg,
    # 2 x (w, b) + head weight for rec
    assert len(student.params) == 8 + 6 + 5
    assert len(teacher.params) == 8 + 6
    save_checkpoint(tmp_path / "c.ckpt", [student, teacher])
    assert len(load_checkpoint(tmp_path / "c.ckpt").tensors) == 33


def test_checkpoint_header_layout(nets):
    student, _ = nets
    blob = encode_checkpoint({"student.x": np.array([1.5], np.float32)}, step=7)
    assert blob[:8] == MAGIC
    assert blob[8:16] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert blob[16:18] == (9).to_bytes(2, "little") and blob[18:27] == b"student.x"
    assert blob[27:29] == bytes([0, 1]) and blob[29:33] == (1).to_bytes(4, "little")
    assert blob[33:37] == np.float32(1.5).tobytes()
    assert blob[37:45] == (7).to_bytes(8, "little") and len(blob) == 45 + 32


def test_corrupt_magic_rejected(tmp_path, nets):
    path = save_checkpoint(tmp_path / "a.ckpt", list(nets))
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(MagicError):
        load_checkpoint(path)


def test_truncated_and_mismatched_checkpoints(tmp_path, nets):
    path = save_checkpoint(tmp_path / "a.ckpt", list(nets))
    blob = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:-40])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(path, NetworkConfig(num_classes=6, base_width=4, latent_width=5))
