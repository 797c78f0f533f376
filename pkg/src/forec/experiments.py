"""Cached multi-seed training runs for the ablation studies.

Every run is keyed by its resolved config, the dataset recipe and a digest of
the source files that influence training. Results land in one JSON file per
run, so an interrupted sweep resumes where it stopped and a code change
invalidates stale numbers automatically.

    python -m forec.experiments --cache results --seeds 5
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from forec import trainer
from forec.config import from_dict
from forec.dataset import Dataset, make_dataset

DEFAULT_CACHE = Path(os.environ.get("FOREC_CACHE", Path(__file__).resolve().parents[2] / "results"))
SEMI_MODES = ("supervised", "baseline", "baseline+rec", "baseline+forec", "baseline+fgbg")
DATA_RECIPE = {"train_count": 256, "val_count": 64, "height": 64, "width": 64,
               "num_object_classes": 3, "seed": 0}

# modules whose behaviour can change a training result
_TRAINING_SOURCES = ("augment.py", "checkpoint.py", "config.py", "dataset.py", "metrics.py",
                     "netmodel.py", "pseudolabel.py", "trainer.py", "core/ops.py", "core/optim.py",
                     "core/tape.py")


def source_digest() -> str:
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for rel in _TRAINING_SOURCES:
        h.update(rel.encode())
        h.update((root / rel).read_bytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class RunSpec:
    mode: str
    seed: int
    labeled_fraction: float
    extra: tuple = ()

    def overrides(self) -> dict:
        return {"train.mode": self.mode, "train.seed": self.seed,
                "data.labeled_fraction": self.labeled_fraction, **dict(self.extra)}

    @property
    def label(self) -> str:
        return f"{self.mode}@{self.labeled_fraction:g}#s{self.seed}"


_datasets: dict[str, Dataset] = {}


def _dataset(recipe: dict) -> Dataset:
    key = json.dumps(recipe, sort_keys=True)
    if key not in _datasets:
        _datasets[key] = make_dataset(**recipe)
    return _datasets[key]


def run_key(spec: RunSpec, recipe: dict = DATA_RECIPE) -> tuple[str, dict]:
    cfg = from_dict(spec.overrides()).validate()
    ident = {"config": cfg.to_dict(), "data": recipe, "source": source_digest()}
    blob = json.dumps(ident, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:20], ident


def run_cached(spec: RunSpec, cache_dir=DEFAULT_CACHE, recipe: dict = DATA_RECIPE, compute: bool = True):
    """Result dict for ``spec``; trains (and stores) it when not cached.

    Returns None when the run is missing and ``compute`` is False.
    """
    key, ident = run_key(spec, recipe)
    path = Path(cache_dir) / f"{key}.json"
    if path.is_file():
        return json.loads(path.read_text())
    if not compute:
        return None
    cfg = from_dict(spec.overrides()).validate()
    t0 = time.perf_counter()
    result = trainer.train(cfg, dataset=_dataset(recipe))
    elapsed = time.perf_counter() - t0
    doc = {"label": spec.label, "key": key, **ident, "final_miou": result.final_miou,
           "curve": [row["val_miou"] for row in result.rows], "steps": len(result.history),
           "seconds": round(elapsed, 1)}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return doc


def ablation_specs(seeds=range(5)) -> list[RunSpec]:
    """Every run the acceptance suite needs, cheapest first."""
    specs = [RunSpec("supervised", 0, 1.0)]
    for s in seeds:
        specs += [RunSpec(m, s, 0.0625) for m in SEMI_MODES]
    for s in seeds:
        specs += [RunSpec(m, s, 0.5) for m in ("baseline", "baseline+rec")]
    return specs


def mean_miou(runs) -> float:
    return float(np.mean([r["final_miou"] for r in runs]))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="populate the ablation result cache")
    ap.add_argument("--cache", type=Path, default=DEFAULT_CACHE)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--dry-run", action="store_true", help="list missing runs only")
    args = ap.parse_args(argv)
    for spec in ablation_specs(range(args.seeds)):
        cached = run_cached(spec, args.cache, compute=False)
        if cached is None and args.dry_run:
            print("missing", spec.label, flush=True)
            continue
        doc = cached or run_cached(spec, args.cache)
        print(f"{spec.label:32s} miou={doc['final_miou']:.4f} t={doc['seconds']}s", flush=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
