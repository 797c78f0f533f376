"""``forec`` command line: gen-data, train, eval, latent, grad-check.

Exit codes: 0 success, 1 gradient check failed, 2 usage or config error,
3 numerical failure (NaN/Inf during training).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from forec import latentviz, trainer
from forec.checkpoint import load_checkpoint
from forec.config import MODES, from_dict, load_config
from forec.core.gradcheck import CASES, run_suite
from forec.dataset import load_dataset, make_dataset, save_dataset
from forec.errors import ForecError, NumericalError
from forec.netmodel import forward_seg
from forec.pnm import read_label_pgm, read_ppm

EXIT_OK, EXIT_GRAD, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOLERANCE = 1e-4

log = logging.getLogger("forec")


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from None
    return h, w


def _dump(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ------------------------------------------------------------------ subcommands

def cmd_gen_data(args) -> int:
    h, w = args.size
    if args.classes < 1 or args.classes > 8:
        raise UsageError("--classes must be between 1 and 8")
    if h < 32 or w < 32:
        raise UsageError("--size must be at least 32x32")
    if args.count < 1 or args.val < 0:
        raise UsageError("--count must be >= 1 and --val >= 0")
    ds = make_dataset(args.count, args.val, h, w, args.classes, args.seed)
    out = save_dataset(ds, args.out)
    _dump({"out": str(out), "train": len(ds.train_ids), "val": len(ds.val_ids),
           "num_classes": ds.num_classes, "size": [h, w], "seed": args.seed,
           "foreground_fraction": float((ds.labels > 0).mean())})
    return EXIT_OK


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else from_dict({})
    overrides = _parse_set(args.set)
    if args.mode is not None:
        overrides["train.mode"] = args.mode
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if args.data is not None:
        overrides["data.path"] = args.data
    cfg = cfg.with_overrides(overrides).validate()
    if not cfg.data.path:
        raise UsageError("no dataset path: set data.path in the config or pass --data")
    if not Path(cfg.data.path).is_dir():
        raise UsageError(f"dataset directory {cfg.data.path} does not exist")

    def progress(epoch, row):
        log.info("epoch %d step %d val_miou %.4f", epoch, row["step"], row["val_miou"])

    result = trainer.train(cfg, out_dir=args.out, progress=progress)
    _dump({"out": str(args.out), "epochs": cfg.train.epochs, "mode": cfg.train.mode,
           "final_miou": result.final_miou})
    return EXIT_OK


def _eval_network(ckpt):
    net = ckpt.teacher or ckpt.student
    if net is None:
        raise UsageError("checkpoint holds no network")
    return net


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    net = _eval_network(ckpt)
    ds = load_dataset(args.data)
    if net.config.num_classes != ds.num_classes:
        raise UsageError(f"checkpoint predicts {net.config.num_classes} classes but the dataset has "
                         f"{ds.num_classes}")
    ids = {"val": ds.val_ids, "train": ds.train_ids, "all": list(ds.ids)}[args.split]
    if not ids:
        raise UsageError(f"dataset has no {args.split} images")
    cm = trainer.evaluate(net, ds, ids)
    per_class, mean = cm.miou()
    if args.json:
        _dump({"split": args.split, "images": len(ids), "num_classes": ds.num_classes,
               "iou": per_class, "miou": mean, "pixel_accuracy": cm.pixel_accuracy(),
               "network": net.role})
    else:
        for c, v in enumerate(per_class):
            print(f"class {c}: " + ("n/a" if v is None else f"{v:.4f}"))
        print(f"mIoU: {mean:.4f}")
    return EXIT_OK


def cmd_latent(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    student = ckpt.student
    if student is None or not student.has_aux:
        raise UsageError("checkpoint has no reconstruction decoder")
    image = read_ppm(args.image)
    lat = latentviz.extract_latents(student, image)
    if args.mask is not None:
        labels = read_label_pgm(args.mask)
        mask = ((labels > 0) & (labels != 255)).astype(np.uint8)
    else:
        # no ground truth: take the segmentation network's own foreground
        net = ckpt.teacher or student
        mask = (np.argmax(forward_seg(net, image[None])[0], axis=0) > 0).astype(np.uint8)
    if mask.shape != image.shape[1:]:
        raise UsageError(f"mask shape {mask.shape} does not match image {image.shape[1:]}")
    if not mask.any():
        raise UsageError("foreground mask is empty; pass --mask with a label map")
    ranking = latentviz.rank_by_foreground(lat.raw, mask)
    manifest = latentviz.export_grid(lat, args.out, ranking, args.topk)
    _dump({"out": str(args.out), "files": len(manifest["files"]),
           "mean_top3_score": manifest["mean_top3_score"], "top": ranking[:3]})
    return EXIT_OK


def cmd_grad_check(args) -> int:
    names = None
    if args.op:
        unknown = sorted(set(args.op) - set(CASES))
        if unknown:
            raise UsageError(f"unknown op(s) {', '.join(unknown)}; choose from {', '.join(sorted(CASES))}")
        names = args.op
    results = run_suite(names, trials=args.trials, seed=args.seed)
    ok = all(err < GRAD_TOLERANCE for err in results.values())
    for name, err in results.items():
        print(f"{name:18s} max_rel_err={err:.3e} {'ok' if err < GRAD_TOLERANCE else 'FAIL'}")
    return EXIT_OK if ok else EXIT_GRAD


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forec", description="Semi-supervised segmentation lab with a foreground-only reconstruction head.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", type=int, default=256, help="training images")
    p.add_argument("--val", type=int, default=64, help="validation images")
    p.add_argument("--size", type=_size, default=(64, 64), help="HxW, default 64x64")
    p.add_argument("--classes", type=int, default=3, help="object classes (1-8)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train student/teacher networks")
    p.add_argument("--config", type=Path, help="JSON config (nested or dotted keys)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--data", help="override data.path")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any config override, repeatable")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (teacher if present)")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("latent", help="export ranked latent images for one image")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path, help="P6 image")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--topk", type=int, help="export only the best K slices")
    p.add_argument("--mask", type=Path, help="P5 label map; default: predicted foreground")
    p.set_defaults(func=cmd_latent)

    p = sub.add_parser("grad-check", help="finite-difference check of every differentiable op")
    p.add_argument("--op", action="append", help="restrict to this op (repeatable)")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"forec: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ForecError, FileNotFoundError) as exc:
        print(f"forec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
