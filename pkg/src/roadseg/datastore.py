"""Dataset manifests and supervision-kind mixing.

A dataset is described by a ``dataset.jsonl`` file: one JSON record per
line with keys ``image``, ``gt``, ``valid``, ``kind`` ("dense"|"sparse"),
``split`` ("train"|"val") and ``id``. Generated datasets carry both a
dense and a sparse record for every frame; :func:`apply_mix` then decides,
per training frame, which supervision variant a run actually sees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

KIND_DENSE = "dense"
KIND_SPARSE = "sparse"
SPLIT_TRAIN = "train"
SPLIT_VAL = "val"

MANIFEST_NAME = "dataset.jsonl"


@dataclass(frozen=True)
class ManifestRecord:
    """One supervision variant of one frame."""

    image: str
    gt: str
    valid: str
    kind: str
    split: str
    frame_id: str

    def __post_init__(self):
        if self.kind not in (KIND_DENSE, KIND_SPARSE):
            raise ValueError(f"unknown supervision kind '{self.kind}'")
        if self.split not in (SPLIT_TRAIN, SPLIT_VAL):
            raise ValueError(f"unknown split '{self.split}'")


@dataclass(frozen=True)
class MixPlan:
    """Fraction of training frames that keep their dense variant."""

    ratio_dense: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.ratio_dense <= 1.0):
            raise ValueError(f"ratio_dense must be in [0, 1], got {self.ratio_dense}")


def manifest_line(record: ManifestRecord) -> str:
    return json.dumps(
        {
            "image": record.image,
            "gt": record.gt,
            "valid": record.valid,
            "kind": record.kind,
            "split": record.split,
            "id": record.frame_id,
        },
        sort_keys=True,
    )


def write_manifest(records: Sequence[ManifestRecord], path) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(manifest_line(rec) + "\n")


def load_manifest(path) -> list[ManifestRecord]:
    """Parse and validate a manifest; paths are resolved against its directory.

    Raises with the offending line number on malformed lines and checks
    that every referenced file exists.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest file not found: {path}")
    base = path.parent
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON record: {e}") from e
            try:
                rec = ManifestRecord(
                    image=str(base / raw["image"]),
                    gt=str(base / raw["gt"]),
                    valid=str(base / raw["valid"]),
                    kind=raw["kind"],
                    split=raw["split"],
                    frame_id=str(raw["id"]),
                )
            except KeyError as e:
                raise ValueError(f"{path}:{lineno}: missing field {e}") from e
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from e
            for p in (rec.image, rec.gt, rec.valid):
                if not Path(p).is_file():
                    raise FileNotFoundError(f"{path}:{lineno}: referenced file missing: {p}")
            records.append(rec)
    return records


def apply_mix(records: Sequence[ManifestRecord], plan: MixPlan) -> list[ManifestRecord]:
    """Pick one supervision variant per training frame.

    floor(ratio_dense * n) of the training frames, chosen by seeded draw
    over the sorted frame ids, keep their dense variant; the rest keep the
    sparse one. Validation frames always resolve to their dense variant,
    since evaluation scores against full masks. Every train frame must
    offer both variants and every val frame a dense one.
    """
    by_frame: dict[tuple[str, str], dict[str, ManifestRecord]] = {}
    order: list[tuple[str, str]] = []
    for rec in records:
        key = (rec.split, rec.frame_id)
        if key not in by_frame:
            by_frame[key] = {}
            order.append(key)
        by_frame[key][rec.kind] = rec

    train_ids = sorted(fid for (split, fid) in order if split == SPLIT_TRAIN)
    for fid in train_ids:
        variants = by_frame[(SPLIT_TRAIN, fid)]
        for kind in (KIND_DENSE, KIND_SPARSE):
            if kind not in variants:
                raise ValueError(f"train frame '{fid}' lacks a {kind} variant")
    n_dense = int(np.floor(plan.ratio_dense * len(train_ids)))
    rng = np.random.default_rng(plan.seed)
    dense_ids = set(np.array(train_ids, dtype=object)[rng.permutation(len(train_ids))[:n_dense]])

    out = []
    for split, fid in order:
        variants = by_frame[(split, fid)]
        if split == SPLIT_VAL:
            if KIND_DENSE not in variants:
                raise ValueError(f"val frame '{fid}' lacks a dense variant")
            out.append(variants[KIND_DENSE])
        else:
            kind = KIND_DENSE if fid in dense_ids else KIND_SPARSE
            out.append(variants[kind])
    return out


def mixed_union(records: Sequence[ManifestRecord]) -> list[ManifestRecord]:
    """Keep every training variant (frames appear once per supervision kind)
    and resolve validation frames to their dense variant."""
    out = [r for r in records if r.split == SPLIT_TRAIN]
    seen_val = set()
    for r in records:
        if r.split == SPLIT_VAL and r.kind == KIND_DENSE and r.frame_id not in seen_val:
            seen_val.add(r.frame_id)
            out.append(r)
    return out
