"""IoU evaluation and the supervision-mixing experiments.

The headline experiment trains three models under identical seeds, one per
supervision regime (dense 2D masks only, projected sparse masks only, and
a mix of both), and reports validation IoU for each; the ratio sweep
trains one model per dense-mask fraction. Independent trainings run in
parallel worker processes, each fully deterministic, so reports are
byte-reproducible for a fixed seed.
"""

from __future__ import annotations

import csv
import multiprocessing
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from . import datastore, micronet
from .losskernel import sigmoid
from .maskgen import load_mask_png

# Condition labels, matching the usual three-regime experiment tables.
COND_DENSE = "2D only (baseline)"
COND_SPARSE = "Projected 3D only"
COND_MIX = "mix 2D + projected 3D"

_THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; empty vs empty is 1.0."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred != 0
    g = gt != 0
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    """Threshold a prediction plane (or raw probability array) to {0, 1}."""
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    probs = getattr(pred, "probs", pred)
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def _as_net(model) -> micronet.MicroNet:
    if isinstance(model, micronet.MicroNet):
        return model
    return micronet.load_checkpoint(model)


def _val_dense_records(records: Sequence[datastore.ManifestRecord]) -> list[datastore.ManifestRecord]:
    return [r for r in records if r.split == datastore.SPLIT_VAL and r.kind == datastore.KIND_DENSE]


def evaluate(model, manifest, threshold: float = 0.5, batch_size: int = 8) -> float:
    """Mean IoU of a model over the validation split, scored on dense masks.

    ``model`` is a MicroNet or a checkpoint path; ``manifest`` is a
    manifest path or a sequence of records (the validation subset is
    selected automatically).
    """
    net = _as_net(model)
    if isinstance(manifest, (str, Path)):
        records = datastore.load_manifest(manifest)
    else:
        records = list(manifest)
    val = _val_dense_records(records) or [r for r in records if r.kind == datastore.KIND_DENSE]
    if not val:
        raise ValueError("no dense validation records to evaluate on")
    scores = []
    for start in range(0, len(val), batch_size):
        chunk = val[start:start + batch_size]
        images = np.stack([micronet._load_image(r.image) for r in chunk])
        logits = net.forward_batch(images)
        for i, rec in enumerate(chunk):
            probs = sigmoid(logits[i])
            scores.append(iou(binarize(probs, threshold), load_mask_png(rec.gt)))
    return float(np.mean(scores))


@dataclass(frozen=True)
class ExperimentReport:
    """Per-condition IoUs and/or a ratio-IoU curve, plus provenance."""

    conditions: tuple[tuple[str, float], ...] = ()
    sweep: tuple[tuple[float, float], ...] = ()
    config: dict = field(default_factory=dict)
    runtime_seconds: float = 0.0

    def __post_init__(self):
        for name, value in self.conditions:
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"IoU for '{name}' outside [0, 1]: {value}")
        for ratio, value in self.sweep:
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"IoU at ratio {ratio} outside [0, 1]: {value}")


def _train_eval_job(job: tuple) -> tuple[str, float]:
    """Train one model and score it; runs in a worker process."""
    label, records, cfg, checkpoint_path, metrics_path = job
    net, _ = micronet.train(records, cfg, checkpoint_path=checkpoint_path,
                            metrics_path=metrics_path)
    return label, evaluate(net, records)


def _run_jobs(jobs: list[tuple], parallel: bool) -> list[tuple[str, float]]:
    if not parallel or len(jobs) <= 1:
        return [_train_eval_job(j) for j in jobs]
    saved = {k: os.environ.get(k) for k in _THREAD_ENV}
    for k in _THREAD_ENV:
        os.environ[k] = "1"  # workers get single-threaded BLAS via inherited env
    try:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(min(len(jobs), os.cpu_count() or 1)) as pool:
            return pool.map(_train_eval_job, jobs)
    finally:
        for k, v in saved.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in text.lower()).strip("_")


def run_conditions(manifest, cfg: micronet.TrainConfig, out_dir,
                   parallel: bool = True) -> ExperimentReport:
    """Train and evaluate the three supervision regimes under one seed.

    The mix condition uses duplication: every training frame appears twice,
    once with its dense and once with its sparse masks, mirroring datasets
    where the two annotation sets jointly exceed the image count. Writes
    ``conditions.csv`` plus a checkpoint and metrics log per condition.
    """
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(manifest, (str, Path)):
        records = datastore.load_manifest(manifest)
    else:
        records = list(manifest)
    variants = {
        COND_DENSE: datastore.apply_mix(records, datastore.MixPlan(1.0, cfg.seed)),
        COND_SPARSE: datastore.apply_mix(records, datastore.MixPlan(0.0, cfg.seed)),
        COND_MIX: datastore.mixed_union(records),
    }
    job_cfg = replace(cfg, mix_ratio=None)
    jobs = [
        (name, recs, job_cfg,
         str(out_dir / f"model_{_slug(name)}.ckpt"),
         str(out_dir / f"metrics_{_slug(name)}.csv"))
        for name, recs in variants.items()
    ]
    results = dict(_run_jobs(jobs, parallel))
    conditions = tuple((name, results[name]) for name in (COND_DENSE, COND_SPARSE, COND_MIX))
    runtime = time.perf_counter() - t0
    report = ExperimentReport(
        conditions=conditions,
        config={"seed": cfg.seed, "epochs": cfg.epochs, "batch_size": cfg.batch_size,
                "mixing": "duplication"},
        runtime_seconds=runtime,
    )
    with open(out_dir / "conditions.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["condition", "iou"])
        for name, value in report.conditions:
            writer.writerow([name, repr(value)])
    return report


def run_ratio_sweep(manifest, ratios: Sequence[float], cfg: micronet.TrainConfig,
                    out_dir, parallel: bool = True) -> ExperimentReport:
    """Train one model per dense-mask ratio (partition mixing) and report IoUs.

    Each ratio reassigns the supervision kind of a seeded subset of
    training frames, keeping the frame count constant, so the curve
    isolates the effect of supervision type. Writes ``sweep.csv``.
    """
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(manifest, (str, Path)):
        records = datastore.load_manifest(manifest)
    else:
        records = list(manifest)
    for r in ratios:
        if not (0.0 <= r <= 1.0):
            raise ValueError(f"ratio {r} outside [0, 1]")
    job_cfg = replace(cfg, mix_ratio=None)
    jobs = []
    for r in ratios:
        mixed = datastore.apply_mix(records, datastore.MixPlan(float(r), cfg.seed))
        tag = f"{float(r):g}"
        jobs.append((tag, mixed, job_cfg,
                     str(out_dir / f"model_ratio_{tag}.ckpt"),
                     str(out_dir / f"metrics_ratio_{tag}.csv")))
    results = dict(_run_jobs(jobs, parallel))
    sweep = tuple((float(r), results[f"{float(r):g}"]) for r in ratios)
    runtime = time.perf_counter() - t0
    report = ExperimentReport(
        sweep=sweep,
        config={"seed": cfg.seed, "epochs": cfg.epochs, "batch_size": cfg.batch_size,
                "mixing": "partition"},
        runtime_seconds=runtime,
    )
    with open(out_dir / "sweep.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["ratio_dense", "iou"])
        for ratio, value in report.sweep:
            writer.writerow([repr(ratio), repr(value)])
    return report


def save_overlays(model, manifest, out_dir, threshold: float = 0.5,
                  alpha: float = 0.45) -> list[Path]:
    """Write per-frame PNGs with the predicted road blended over the image."""
    net = _as_net(model)
    if isinstance(manifest, (str, Path)):
        records = datastore.load_manifest(manifest)
    else:
        records = list(manifest)
    val = _val_dense_records(records) or list(records)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in val:
        image = micronet._load_image(rec.image)
        logits = net.forward_batch(image[None])[0]
        mask = binarize(sigmoid(logits), threshold)
        overlay = image.astype(np.float64)
        tint = np.array([1.0, 0.15, 0.15])
        sel = mask.astype(bool)
        overlay[sel] = (1 - alpha) * overlay[sel] + alpha * tint
        path = out_dir / f"{rec.frame_id}_overlay.png"
        Image.fromarray((overlay * 255.0).round().astype(np.uint8), mode="RGB").save(path)
        written.append(path)
    return written
