"""Sparse ground-truth construction from projected lidar points.

A projected cloud becomes two image-sized planes: ``labels`` marks road
pixels and ``valid`` marks the pixels where the loss may be computed (every
pixel that received a point, plus randomly drawn negative points in the
upper image region, which would otherwise carry no supervision at all).
Dense 2D annotations use the same container with an all-ones valid plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .geometry import PixelCoord


@dataclass(frozen=True)
class SparseGroundTruth:
    """Per-pixel labels plus the validity plane the loss is restricted to.

    ``labels`` and ``valid`` are (H, W) uint8 planes of {0, 1};
    ``valid_count`` is the number of valid pixels and ``pixel_count`` the
    total H * W. Road labels may appear only on valid pixels.
    """

    labels: np.ndarray
    valid: np.ndarray
    valid_count: int
    pixel_count: int

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        valid = np.ascontiguousarray(self.valid, dtype=np.uint8)
        if labels.ndim != 2 or labels.shape != valid.shape:
            raise ValueError(f"label/valid plane shapes differ: {labels.shape} vs {valid.shape}")
        if labels.max(initial=0) > 1 or valid.max(initial=0) > 1:
            raise ValueError("planes must be binary {0, 1}")
        if np.any(labels > valid):
            raise ValueError("road label set on a pixel outside the valid plane")
        if self.valid_count != int(valid.sum()):
            raise ValueError(f"valid_count={self.valid_count} != population count {int(valid.sum())}")
        if self.pixel_count != labels.size:
            raise ValueError(f"pixel_count={self.pixel_count} != H*W={labels.size}")
        labels.flags.writeable = False
        valid.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_planes(cls, labels: np.ndarray, valid: np.ndarray) -> "SparseGroundTruth":
        labels = np.asarray(labels, dtype=np.uint8)
        valid = np.asarray(valid, dtype=np.uint8)
        return cls(labels=labels, valid=valid, valid_count=int(valid.sum()), pixel_count=labels.size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def is_dense(self) -> bool:
        return self.valid_count == self.pixel_count


@dataclass(frozen=True)
class NoiseConfig:
    """Random negative points added to the upper image region.

    ``density_ratio`` scales the point budget: ceil(density_ratio * number
    of projected points) pixels are drawn. ``region_fraction`` is the
    fraction of image height, from the top, the draws are confined to.
    """

    density_ratio: float = 0.5
    region_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.density_ratio < 0:
            raise ValueError(f"density_ratio must be >= 0, got {self.density_ratio}")
        if not (0.0 <= self.region_fraction <= 1.0):
            raise ValueError(f"region_fraction must be in [0, 1], got {self.region_fraction}")


def build_sparse_gt(
    projected: Sequence[tuple[PixelCoord, int]],
    image_shape: tuple[int, int],
    noise: NoiseConfig,
) -> SparseGroundTruth:
    """Rasterize projected (pixel, label) pairs into a sparse ground truth.

    Every hit pixel becomes valid. A pixel is labeled road only if strictly
    more road than non-road points landed on it (ties break to non-road).
    Noise pixels are then drawn uniformly without replacement from the
    not-yet-valid pixels of the upper region and marked valid with label 0.
    If fewer free pixels exist than requested, the draw clamps to what is
    available.
    """
    h, w = image_shape
    road_hits = np.zeros((h, w), dtype=np.int64)
    other_hits = np.zeros((h, w), dtype=np.int64)
    for coord, label in projected:
        if not (0 <= coord.u < w and 0 <= coord.v < h):
            raise ValueError(f"projected pixel {(coord.u, coord.v)} outside {w}x{h} image")
        if label:
            road_hits[coord.v, coord.u] += 1
        else:
            other_hits[coord.v, coord.u] += 1
    valid = ((road_hits + other_hits) > 0).astype(np.uint8)
    labels = (road_hits > other_hits).astype(np.uint8)

    n_noise = math.ceil(noise.density_ratio * len(projected))
    if n_noise > 0:
        top_rows = int(math.floor(noise.region_fraction * h))
        free = np.flatnonzero(valid[:top_rows] == 0)
        n_noise = min(n_noise, free.size)
        if n_noise > 0:
            rng = np.random.default_rng(noise.seed)
            chosen = rng.choice(free, size=n_noise, replace=False)
            flat = valid.reshape(-1)
            flat[chosen] = 1  # rows < top_rows, so flat indices are in range
    return SparseGroundTruth.from_planes(labels, valid)


def densify(dense_labels: np.ndarray) -> SparseGroundTruth:
    """Wrap a full 2D annotation: the valid plane is all ones."""
    labels = np.asarray(dense_labels, dtype=np.uint8)
    if labels.ndim != 2:
        raise ValueError(f"dense labels must be a 2D plane, got shape {labels.shape}")
    return SparseGroundTruth.from_planes(labels, np.ones_like(labels))


def hflip(gt: SparseGroundTruth) -> SparseGroundTruth:
    """Mirror both planes about the vertical axis."""
    return SparseGroundTruth(
        labels=np.ascontiguousarray(gt.labels[:, ::-1]),
        valid=np.ascontiguousarray(gt.valid[:, ::-1]),
        valid_count=gt.valid_count,
        pixel_count=gt.pixel_count,
    )


def save_mask_png(plane: np.ndarray, path) -> None:
    """Write a {0,1} plane as an 8-bit grayscale PNG (1 -> 255)."""
    arr = (np.asarray(plane, dtype=np.uint8) * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(Path(path), format="PNG")


def load_mask_png(path) -> np.ndarray:
    """Read an 8-bit mask PNG back to a {0,1} uint8 plane."""
    with Image.open(Path(path)) as img:
        arr = np.asarray(img.convert("L"))
    return (arr >= 128).astype(np.uint8)


def save_ground_truth(gt: SparseGroundTruth, stem) -> tuple[Path, Path]:
    """Persist as ``<stem>_gt.png`` and ``<stem>_valid.png``; returns the paths."""
    stem = Path(stem)
    gt_path = stem.parent / (stem.name + "_gt.png")
    valid_path = stem.parent / (stem.name + "_valid.png")
    save_mask_png(gt.labels, gt_path)
    save_mask_png(gt.valid, valid_path)
    return gt_path, valid_path


def load_ground_truth(gt_path, valid_path) -> SparseGroundTruth:
    """Load the two-PNG representation written by :func:`save_ground_truth`."""
    return SparseGroundTruth.from_planes(load_mask_png(gt_path), load_mask_png(valid_path))
