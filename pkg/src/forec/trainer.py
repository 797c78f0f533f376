"""Mean-teacher pseudo-label training with an optional auxiliary decoder.

Per step the student minimises ``L_s + lambda_ul * L_ul + lambda_rec * L_rec``
where ``L_rec`` is, depending on ``train.mode``:

* ``baseline+rec``   plain image reconstruction (masked MSE, all-ones mask)
* ``baseline+forec`` foreground-only reconstruction; unlabeled pixels are
  gated by the teacher's confidence (scenarios 1/2/3)
* ``baseline+fgbg``  binary foreground/background cross-entropy

``supervised`` drops both unlabeled terms, ``baseline`` drops ``L_rec``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from forec import augment as aug
from forec import pseudolabel as pl
from forec.checkpoint import rng_state_bytes, save_checkpoint
from forec.config import AUX_MODES, TrainConfig
from forec.core.ops import softmax
from forec.core.optim import SgdState, poly_lr, sgd_step
from forec.core.tape import Tape
from forec.dataset import BatchSampler, Dataset, Partition, load_dataset, partition
from forec.errors import NumericalError
from forec.metrics import ConfusionMatrix
from forec.netmodel import Network, NetworkConfig, build, ema_update, forward

log = logging.getLogger(__name__)

CSV_COLUMNS = ["epoch", "step", "lr", "loss_s", "loss_ul", "loss_rec", "total",
               "pseudo_pixel_frac", "scenario3_frac", "val_miou"]
EVAL_CHUNK = 16


@dataclass
class StepLosses:
    loss_s: np.float32
    loss_ul: np.float32
    loss_rec: np.float32
    total: np.float32
    lr: float
    pseudo_pixels: int = 0
    scenario3_pixels: int = 0
    unlabeled_pixels: int = 0
    empty_losses: int = 0  # losses that hit the no-valid-pixel convention


@dataclass
class TrainState:
    config: TrainConfig
    dataset: Dataset
    part: Partition
    student: Network
    teacher: Network
    sgd: SgdState
    rng: np.random.Generator
    total_steps: int
    step: int = 0

    @property
    def object_set(self) -> list[int]:
        oc = self.config.pseudo.object_classes
        return list(range(1, self.dataset.num_classes)) if oc is None else list(oc)


@dataclass
class TrainResult:
    student: Network
    teacher: Network
    rows: list[dict]
    history: list[StepLosses] = field(default_factory=list)
    checkpoint: Path | None = None

    @property
    def final_miou(self) -> float:
        return self.rows[-1]["val_miou"]


def network_config(cfg: TrainConfig, num_classes: int) -> NetworkConfig:
    return NetworkConfig(num_classes=num_classes, base_width=cfg.net.base_width,
                         stages=cfg.net.stages, latent_width=cfg.net.latent_width,
                         aux_channels=AUX_MODES.get(cfg.train.mode, 3))


def steps_per_epoch(part: Partition, b: int) -> int:
    return math.ceil(max(len(part.unlabeled), len(part.labeled)) / b)


def init_state(cfg: TrainConfig, ds: Dataset) -> TrainState:
    part = partition(ds, cfg.data.labeled_fraction, cfg.partition_seed)
    student, teacher = build(network_config(cfg, ds.num_classes), cfg.train.seed)
    t = cfg.train
    sgd = SgdState(lr0=t.lr0, momentum=t.momentum, weight_decay=t.weight_decay, power=t.power)
    rng = np.random.default_rng([t.seed, 1])
    total = t.epochs * steps_per_epoch(part, t.batch_size)
    return TrainState(cfg, ds, part, student, teacher, sgd, rng, total)


# ------------------------------------------------------------------ views

def _augment_batch(images, labels, rng, cfg: aug.AugmentConfig, extra=None):
    """Weak flip then strong pipeline; sample i is CutMix-ed with sample i+1.

    ``extra`` is an optional per-pixel map batch (same frame as ``labels``)
    replayed through each sample's geometry with fill value 3 (uncertain).
    Returns (x, y, extra') with the weak views' flips applied throughout.
    """
    b = len(images)
    weak_x, weak_y, weak_e = [], [], []
    for i in range(b):
        flip = bool(rng.random() < cfg.flip_p)
        weak_x.append(aug.hflip(images[i]) if flip else images[i])
        weak_y.append(aug.hflip(labels[i]) if flip else labels[i])
        if extra is not None:
            weak_e.append(aug.hflip(extra[i]) if flip else extra[i])
    xs, ys, es = [], [], []
    for i in range(b):
        j = (i + 1) % b
        x, y, rec = aug.strong_aug(weak_x[i], weak_y[i], weak_x[j], weak_y[j], rng, cfg, partner_id=j)
        xs.append(x)
        ys.append(y)
        if extra is not None:
            es.append(aug.replay_geometry(rec, weak_e[i], weak_e[j], fill=pl.SCENARIO_UNCERTAIN))
    return np.stack(xs), np.stack(ys), (np.stack(es) if extra is not None else None)


def teacher_probs(teacher: Network, x) -> np.ndarray:
    return softmax(forward(teacher, x)["seg"].value)


def prepare_unlabeled(state: TrainState, images, rng):
    """Teacher pseudo-labels on weak views, transported to the student's strong views.

    The weak flip is drawn here, the teacher runs on the flipped images, and the
    strong pipeline then starts from those same flipped images.
    """
    cfg = state.config
    b = len(images)
    flips = rng.random(b) < cfg.augment.flip_p
    weak = np.stack([aug.hflip(im) if f else im for im, f in zip(images, flips)])
    probs = teacher_probs(state.teacher, weak)
    pseudo = pl.make_pseudo_labels(probs, cfg.pseudo.tau)
    scen = pl.scenario_map(probs, cfg.pseudo.tau, state.object_set)
    no_flip = aug.AugmentConfig(**{**vars(cfg.augment), "flip_p": 0.0})
    x, y, s = _augment_batch(weak, pseudo.label, rng, no_flip, extra=scen)
    return x, y, s, pseudo


# ------------------------------------------------------------------ step

def train_step(state: TrainState, lab_ids, unl_ids) -> StepLosses:
    cfg = state.config
    mode = cfg.train.mode
    rng = state.rng
    objects = state.object_set
    lam_ul = np.float32(cfg.train.lambda_ul)
    lam_rec = np.float32(cfg.train.lambda_rec)

    images_l, labels_l = state.dataset.take(lab_ids)
    x_l, y_l, _ = _augment_batch(images_l, labels_l, rng, cfg.augment)
    semi = mode != "supervised"
    aux = mode in AUX_MODES
    if semi:
        images_u, _ = state.dataset.take(unl_ids)
        x_u, y_u, scen_u, pseudo = prepare_unlabeled(state, images_u, rng)

    tape = Tape()
    nodes = state.student.bind(tape)
    heads = ("seg", "rec") if aux else ("seg",)
    out_l = forward(state.student, x_l, tape, heads, nodes)
    ls = tape.softmax_ce(out_l["seg"], y_l)
    seeds = [(ls, 1.0)]
    zero = np.float32(0.0)
    loss_ul = loss_rec = zero
    counts = dict(pseudo_pixels=0, scenario3_pixels=0, unlabeled_pixels=0)
    empty = int((y_l != 255).sum() == 0)

    if semi:
        out_u = forward(state.student, x_u, tape, heads, nodes)
        lul = tape.softmax_ce(out_u["seg"], y_u)
        seeds.append((lul, float(lam_ul)))
        loss_ul = np.float32(lul.value)
        counts["pseudo_pixels"] = int((pseudo.label != 255).sum())
        counts["unlabeled_pixels"] = int(pseudo.label.size)
        counts["scenario3_pixels"] = int((scen_u == pl.SCENARIO_UNCERTAIN).sum())
        empty += int((y_u != 255).sum() == 0)

    if aux:
        if mode == "baseline+fgbg":
            rl = tape.softmax_ce(out_l["rec"], pl.fgbg_target(y_l, objects))
            ru = tape.softmax_ce(out_u["rec"], pl.fgbg_target(y_u, objects))
        else:
            if mode == "baseline+forec":
                t_l = pl.forec_target_labeled(x_l, y_l, objects)
                t_u = pl.forec_target_from_scenarios(x_u, scen_u)
                empty += int(t_l.mask.sum() == 0) + int(t_u.mask.sum() == 0)
            else:
                t_l = pl.standard_rec_target(x_l)
                t_u = pl.standard_rec_target(x_u)
            rl = tape.masked_mse(out_l["rec"], t_l.target, t_l.mask)
            ru = tape.masked_mse(out_u["rec"], t_u.target, t_u.mask)
        half = float(lam_rec) / 2.0
        seeds += [(rl, half), (ru, half)]
        loss_rec = np.float32(0.5) * (np.float32(rl.value) + np.float32(ru.value))

    loss_s = np.float32(ls.value)
    total = loss_s + lam_ul * loss_ul + lam_rec * loss_rec
    for name, value in (("loss_s", loss_s), ("loss_ul", loss_ul), ("loss_rec", loss_rec)):
        if not np.isfinite(value):
            raise NumericalError(f"{name} is {value} at step {state.step}", name=name, step=state.step)
    if empty:
        log.debug("step %d: %d loss term(s) had no valid pixels", state.step, empty)

    tape.backward(seeds)
    grads = {k: n.grad for k, n in nodes.items() if n.grad is not None}
    lr = poly_lr(state.sgd.lr0, state.step, state.total_steps, state.sgd.power)
    try:
        sgd_step(state.student.params, grads, state.sgd, lr)
    except NumericalError as exc:
        exc.step = state.step
        raise NumericalError(f"{exc} at step {state.step}", name=exc.name, step=state.step) from exc
    ema_update(state.teacher, state.student, cfg.train.ema_alpha)
    state.step += 1
    return StepLosses(loss_s, loss_ul, loss_rec, total, lr, empty_losses=empty, **counts)


# ------------------------------------------------------------------ evaluation

def predict(net: Network, images) -> np.ndarray:
    preds = []
    for k in range(0, len(images), EVAL_CHUNK):
        logits = forward(net, images[k:k + EVAL_CHUNK])["seg"].value
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.empty((0,) + images.shape[2:], dtype=np.int64)


def evaluate(net: Network, ds: Dataset, ids) -> ConfusionMatrix:
    images, labels = ds.take(ids)
    cm = ConfusionMatrix(ds.num_classes)
    cm.accumulate(predict(net, images), labels)
    return cm


# ------------------------------------------------------------------ loop

def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def train(config: TrainConfig, out_dir=None, dataset: Dataset | None = None, progress=None) -> TrainResult:
    """Run ``epochs * steps_per_epoch`` steps, evaluating the teacher every epoch.

    Writes ``metrics.csv``, ``final.ckpt`` and ``resolved-config.json`` into
    ``out_dir`` when given. ``progress(epoch, row)`` is called after each
    evaluation.
    """
    config.validate()
    ds = dataset if dataset is not None else load_dataset(config.data.path)
    state = init_state(config, ds)
    b = config.train.batch_size
    sampler = BatchSampler(state.part, b, state.rng, use_unlabeled=config.train.mode != "supervised")
    per_epoch = steps_per_epoch(state.part, b)

    def row_for(epoch, losses):
        _, miou = evaluate(state.teacher, ds, state.part.val).miou()
        row = {"epoch": epoch, "step": state.step, "val_miou": miou}
        if losses:
            upix = sum(l.unlabeled_pixels for l in losses)
            row.update(
                lr=losses[-1].lr,
                loss_s=float(np.mean([l.loss_s for l in losses])),
                loss_ul=float(np.mean([l.loss_ul for l in losses])),
                loss_rec=float(np.mean([l.loss_rec for l in losses])),
                total=float(np.mean([l.total for l in losses])),
                pseudo_pixel_frac=sum(l.pseudo_pixels for l in losses) / upix if upix else 0.0,
                scenario3_frac=sum(l.scenario3_pixels for l in losses) / upix if upix else 0.0,
            )
        else:
            row["lr"] = config.train.lr0
        return row

    rows = [row_for(0, [])]
    if progress:
        progress(0, rows[-1])
    history: list[StepLosses] = []
    for epoch in range(1, config.train.epochs + 1):
        epoch_losses = []
        for _ in range(per_epoch):
            lab, unl = sampler.sample()
            epoch_losses.append(train_step(state, lab, unl))
        history.extend(epoch_losses)
        rows.append(row_for(epoch, epoch_losses))
        if progress:
            progress(epoch, rows[-1])

    result = TrainResult(state.student, state.teacher, rows, history)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(rows))
        (out / "resolved-config.json").write_text(config.dumps())
        result.checkpoint = save_checkpoint(out / "final.ckpt", [state.student, state.teacher],
                                            state.step, rng_state_bytes(state.rng))
    return result
