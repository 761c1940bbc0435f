"""Masked binary cross-entropy and its analytic gradient.

The per-image loss is

    L = -(1/M) * sum_i m_i * (y_i log p_i + (1 - y_i) log(1 - p_i))

where m is the validity plane, M = sum(m), y the road labels and p the
predicted road probabilities. With m all ones (M = N) this reduces exactly
to the plain mean binary cross-entropy, which is what lets dense and
sparse supervision mix freely in one batch. The gradient with respect to
the logit l_i (with p_i = sigmoid(l_i)) is m_i (p_i - y_i) / M, so it
vanishes identically outside the valid plane.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .maskgen import SparseGroundTruth

# Probabilities are clamped to [EPS, 1 - EPS] before the log to keep the
# loss finite; the gradient uses the raw probabilities.
EPS = 1e-7


@dataclass(frozen=True)
class PredictionPlane:
    """Predicted road probabilities (H, W), optionally with the raw logits."""

    probs: np.ndarray
    logits: Optional[np.ndarray] = None

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ValueError(f"probs must be a 2D plane, got shape {probs.shape}")
        object.__setattr__(self, "probs", probs)
        if self.logits is not None:
            logits = np.asarray(self.logits, dtype=np.float64)
            if logits.shape != probs.shape:
                raise ValueError(f"logits shape {logits.shape} != probs shape {probs.shape}")
            object.__setattr__(self, "logits", logits)

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "PredictionPlane":
        logits = np.asarray(logits, dtype=np.float64)
        return cls(probs=sigmoid(logits), logits=logits)

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape


@dataclass(frozen=True)
class LossValue:
    """Loss scalar plus the gradient plane with respect to the logits."""

    value: float
    grad_wrt_logits: np.ndarray


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, evaluated in float64."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def masked_bce(pred: PredictionPlane, gt: SparseGroundTruth) -> LossValue:
    """Masked BCE value and logit gradient for one image.

    With no valid pixels (M = 0) the image carries no supervision: the loss
    is defined as 0 and the gradient is identically zero.
    """
    probs = pred.probs
    if probs.shape != gt.shape:
        raise ValueError(f"prediction shape {probs.shape} != ground truth shape {gt.shape}")
    if not np.all(np.isfinite(probs)):
        raise ValueError("prediction contains NaN or infinite values")
    m = gt.valid.astype(np.float64)
    y = gt.labels.astype(np.float64)
    big_m = gt.valid_count
    if big_m == 0:
        return LossValue(value=0.0, grad_wrt_logits=np.zeros_like(probs))
    p = np.clip(probs, EPS, 1.0 - EPS)
    value = -float(np.sum(m * (y * np.log(p) + (1.0 - y) * np.log1p(-p)))) / big_m
    grad = m * (probs - y) / big_m
    return LossValue(value=value, grad_wrt_logits=grad)


def batch_loss(items: Sequence[tuple[PredictionPlane, SparseGroundTruth]]) -> float:
    """Unweighted mean of the per-image masked losses.

    Dense and sparse images therefore contribute equally regardless of how
    many valid pixels each one carries.
    """
    if len(items) == 0:
        raise ValueError("batch_loss requires a non-empty batch")
    return float(np.mean([masked_bce(pred, gt).value for pred, gt in items]))


def masked_bce_planes(
    probs: np.ndarray, y: np.ndarray, m: np.ndarray, valid_counts: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized masked BCE over a stacked batch (B, H, W) of planes.

    Training-loop fast path; pixel-for-pixel it applies the same formulas
    as :func:`masked_bce`. ``valid_counts`` is the per-image M. Returns the
    per-image values (B,) and per-image gradient planes (B, H, W); images
    with M = 0 contribute value 0 and a zero gradient.
    """
    safe_m = np.where(valid_counts > 0, valid_counts, 1).astype(np.float64)
    p = np.clip(probs, EPS, 1.0 - EPS)
    terms = m * (y * np.log(p) + (1.0 - y) * np.log1p(-p))
    values = -terms.sum(axis=(1, 2)) / safe_m
    grads = m * (probs - y) / safe_m[:, None, None]
    zero = valid_counts == 0
    if np.any(zero):
        values = np.where(zero, 0.0, values)
        grads[zero] = 0.0
    return values, grads
