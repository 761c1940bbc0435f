"""A compact convolutional encoder-decoder with hand-written backprop.

The architecture is fixed: three 3x3 conv + ReLU stages (the second and
third with stride 2), two nearest-neighbor x2 upsamples interleaved with
3x3 conv + ReLU stages, and a final 1x1 conv producing per-pixel road
logits. Output spatial dims equal input dims whenever H and W are
divisible by 4. Everything runs on plain numpy arrays in NHWC layout;
convolutions are im2col GEMMs and input gradients are computed as
transposed convolutions (also GEMMs), which keeps the whole training loop
deterministic and fast enough for CPU-scale experiments.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import _convkernels as kernels
from . import datastore
from .losskernel import PredictionPlane, masked_bce_planes, sigmoid
from .maskgen import NoiseConfig, SparseGroundTruth, load_ground_truth, load_mask_png

CHECKPOINT_MAGIC = b"MNET"
CHECKPOINT_VERSION = 1

# (cin, cout, ksize, stride, pad) per layer, in declaration order.
_ARCH = (
    (3, 8, 3, 1, 1),
    (8, 16, 3, 2, 1),
    (16, 32, 3, 2, 1),
    (32, 16, 3, 1, 1),
    (16, 8, 3, 1, 1),
    (8, 1, 1, 1, 0),
)
# Nearest-neighbor x2 upsamples sit before these layer indices.
_UPSAMPLE_BEFORE = (3, 4)


class _Conv:
    """2D convolution layer (NCHW) holding weights, gradients and buffers.

    Heavy lifting happens in the numba kernels of ``_convkernels``; this
    class owns the padded scratch buffers and the cached forward input
    that the weight gradient needs.
    """

    def __init__(self, rng: np.random.Generator, cin: int, cout: int,
                 ksize: int, stride: int, pad: int, dtype):
        self.cin, self.cout, self.k, self.stride, self.pad = cin, cout, ksize, stride, pad
        self.dtype = dtype
        fan_in = ksize * ksize * cin
        bound = math.sqrt(6.0 / fan_in)  # Kaiming-style uniform for ReLU stacks
        shape = (cout, cin, ksize, ksize) if ksize > 1 else (cout, cin)
        self.weight = rng.uniform(-bound, bound, size=shape).astype(dtype)
        self.bias = np.zeros(cout, dtype=dtype)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._buffers: dict[str, np.ndarray] = {}
        self._xpad: Optional[np.ndarray] = None
        self._xshape: Optional[tuple] = None

    def _buf(self, name: str, shape: tuple) -> np.ndarray:
        b = self._buffers.get(name)
        if b is None or b.shape != shape:
            b = np.zeros(shape, dtype=self.dtype)
            self._buffers[name] = b
        return b

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            (h + 2 * self.pad - self.k) // self.stride + 1,
            (w + 2 * self.pad - self.k) // self.stride + 1,
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        self._xshape = x.shape
        if self.k == 1:
            self._xpad = x
            out = self._buf("out", (b, self.cout, h, w))
            kernels.conv1_forward(x, self.weight, self.bias, out)
            return out
        if self.pad:
            xp = self._buf("xpad", (b, c, h + 2 * self.pad, w + 2 * self.pad))
            xp[:, :, self.pad:self.pad + h, self.pad:self.pad + w] = x
        else:
            xp = np.ascontiguousarray(x)
        self._xpad = xp
        ho, wo = self.out_hw(h, w)
        out = self._buf("out", (b, self.cout, ho, wo))
        kernels.conv3_forward(xp, self.weight, self.bias, self.stride, out)
        return out

    def backward(self, dy: np.ndarray, need_dx: bool = True) -> Optional[np.ndarray]:
        """Accumulate weight/bias gradients; return dL/dx unless need_dx=False.

        Must follow a forward pass: the padded input cached then is
        consumed here.
        """
        if self._xpad is None or self._xshape is None:
            raise RuntimeError("conv backward called without a preceding forward pass")
        b, c, h, w = self._xshape
        dy = np.ascontiguousarray(dy)
        np.sum(dy, axis=(0, 2, 3), out=self.grad_bias)
        if self.k == 1:
            kernels.conv1_grad_w(self._xpad, dy, self.grad_weight)
            if not need_dx:
                return None
            dx = self._buf("dx", self._xshape)
            kernels.conv1_grad_x(dy, self.weight, dx)
            return dx
        kernels.conv3_grad_w(self._xpad, dy, self.stride, self.grad_weight)
        if not need_dx:
            return None
        dxp = self._buf("dxpad", self._xpad.shape)
        kernels.conv3_grad_x(dy, self.weight, self.stride, dxp)
        if self.pad:
            return dxp[:, :, self.pad:self.pad + h, self.pad:self.pad + w]
        return dxp


def _upsample2(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    out = np.empty((b, c, 2 * h, 2 * w), dtype=x.dtype)
    out.reshape(b, c, h, 2, w, 2)[:] = x.reshape(b, c, h, 1, w, 1)
    return out


def _upsample2_backward(dy: np.ndarray) -> np.ndarray:
    b, c, h, w = dy.shape
    return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class MicroNet:
    """The fixed 6-conv encoder-decoder. Parameters live in ``self.convs``."""

    def __init__(self, seed: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.convs = [_Conv(rng, *spec, dtype=dtype) for spec in _ARCH]
        self._relu_masks: Optional[list[np.ndarray]] = None

    def parameters(self) -> list[np.ndarray]:
        """Weight and bias arrays in declaration order (mutable references)."""
        out = []
        for conv in self.convs:
            out.append(conv.weight)
            out.append(conv.bias)
        return out

    def gradients(self) -> list[np.ndarray]:
        out = []
        for conv in self.convs:
            out.append(conv.grad_weight)
            out.append(conv.grad_bias)
        return out

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        """Logits (B, H, W) for a batch of images (B, H, W, 3) in [0, 1]."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[3] != 3:
            raise ValueError(f"expected input of shape (B, H, W, 3), got {x.shape}")
        b, h, w, _ = x.shape
        if h % 4 or w % 4:
            raise ValueError(f"input height and width must be divisible by 4, got {h}x{w}")
        x = np.ascontiguousarray(x.transpose(0, 3, 1, 2))  # to NCHW
        masks = []
        for i, conv in enumerate(self.convs):
            if i in _UPSAMPLE_BEFORE:
                x = _upsample2(x)
            x = conv.forward(x)
            if i < len(self.convs) - 1:
                masks.append(x > 0)
                np.maximum(x, 0.0, out=x)  # conv buffer, safe until its next forward
        self._relu_masks = masks
        return x.reshape(b, h, w).copy()

    def backward_batch(self, d_logits: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients for the most recent forward_batch.

        ``d_logits`` is (B, H, W), the loss gradient at the output. Returns
        gradient arrays matching :meth:`parameters` order.
        """
        if self._relu_masks is None:
            raise RuntimeError("backward called without a cached forward pass")
        d = np.asarray(d_logits, dtype=self.dtype)
        d = d.reshape(d.shape[0], 1, *d.shape[1:3])  # to NCHW
        masks = self._relu_masks
        for i in range(len(self.convs) - 1, -1, -1):
            conv = self.convs[i]
            if i > 0:
                d = conv.backward(d)
                if i in _UPSAMPLE_BEFORE:
                    d = _upsample2_backward(d)
                d = d * masks[i - 1]
            else:
                conv.backward(d, need_dx=False)
        self._relu_masks = None
        return self.gradients()


def forward(net: MicroNet, image: np.ndarray) -> PredictionPlane:
    """Run one (H, W, 3) image through the network."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    logits = net.forward_batch(image[None])[0]
    return PredictionPlane.from_logits(logits)


def backward(net: MicroNet, grad_wrt_logits: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients for a single-image loss gradient (H, W)."""
    grad = np.asarray(grad_wrt_logits)
    if grad.ndim != 2:
        raise ValueError(f"expected an (H, W) gradient plane, got shape {grad.shape}")
    return net.backward_batch(grad[None])


class AdamState:
    """First/second moment accumulators and step counter for Adam."""

    def __init__(self, params: Sequence[np.ndarray], beta1: float = 0.937,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
        """Standard bias-corrected Adam update, applied in place."""
        if len(params) != len(self.m):
            raise ValueError(f"expected {len(self.m)} parameter arrays, got {len(params)}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def adam_step(net: MicroNet, grads: Sequence[np.ndarray], opt: AdamState, lr: float) -> None:
    """Apply one Adam update to the network parameters."""
    opt.step(net.parameters(), grads, lr)


@dataclass(frozen=True)
class LrSchedule:
    """Linear decay from ``lr_initial`` at epoch 0 to ``lr_final`` at the last epoch."""

    lr_initial: float = 1e-3
    lr_final: float = 5e-4
    total_epochs: int = 1

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.lr_final > self.lr_initial:
            raise ValueError("schedule must be non-increasing: lr_final <= lr_initial")

    def lr(self, epoch: int) -> float:
        if self.total_epochs == 1:
            return self.lr_initial
        frac = epoch / (self.total_epochs - 1)
        return self.lr_initial + (self.lr_final - self.lr_initial) * frac


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one training run."""

    epochs: int = 150
    batch_size: int = 8
    seed: int = 0
    mix_ratio: Optional[float] = None  # None: use record kinds as given
    noise: Optional[NoiseConfig] = None  # carried for provenance echo only
    augment: bool = True
    lr_initial: float = 1e-3
    lr_final: float = 5e-4

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mix_ratio is not None and not (0.0 <= self.mix_ratio <= 1.0):
            raise ValueError(f"mix_ratio must be in [0, 1], got {self.mix_ratio}")


def save_checkpoint(net: MicroNet, path) -> None:
    """Magic tag + architecture version + little-endian float32 parameter blob."""
    blob = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.parameters())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(blob)


def load_checkpoint(path, dtype=np.float32) -> MicroNet:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported architecture version {version}")
    net = MicroNet(seed=0, dtype=dtype)
    expected = 8 + 4 * net.parameter_count
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    flat = np.frombuffer(data[8:], dtype="<f4")
    offset = 0
    for p in net.parameters():
        p[...] = flat[offset:offset + p.size].reshape(p.shape).astype(dtype)
        offset += p.size
    return net


def _binary_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = int(np.count_nonzero(pred & gt))
    union = int(np.count_nonzero(pred | gt))
    return 1.0 if union == 0 else inter / union


class _TrainArrays:
    """All training frames stacked into arrays, plus mirrored copies."""

    def __init__(self, records: Sequence[datastore.ManifestRecord]):
        images, labels, valids = [], [], []
        for rec in records:
            images.append(_load_image(rec.image))
            gt = load_ground_truth(rec.gt, rec.valid)
            if rec.kind == datastore.KIND_DENSE and not gt.is_dense():
                raise ValueError(f"frame {rec.frame_id}: dense record has a non-dense valid plane")
            labels.append(gt.labels)
            valids.append(gt.valid)
        self.images = np.stack(images)
        self.labels = np.stack(labels)
        self.valid = np.stack(valids)
        self.images_flipped = np.ascontiguousarray(self.images[:, :, ::-1])
        self.labels_flipped = np.ascontiguousarray(self.labels[:, :, ::-1])
        self.valid_flipped = np.ascontiguousarray(self.valid[:, :, ::-1])
        self.valid_counts = self.valid.sum(axis=(1, 2)).astype(np.int64)

    def __len__(self) -> int:
        return len(self.images)

    def gather(self, idx: np.ndarray, flips: np.ndarray):
        """Assemble one batch, flipping the selected items left-right."""
        x = np.empty((len(idx), *self.images.shape[1:]), dtype=np.float32)
        y = np.empty((len(idx), *self.labels.shape[1:]), dtype=np.float64)
        m = np.empty_like(y)
        for j, (i, flip) in enumerate(zip(idx, flips)):
            if flip:
                x[j] = self.images_flipped[i]
                y[j] = self.labels_flipped[i]
                m[j] = self.valid_flipped[i]
            else:
                x[j] = self.images[i]
                y[j] = self.labels[i]
                m[j] = self.valid[i]
        return x, y, m, self.valid_counts[idx]


def _load_image(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"referenced image is unreadable: {p}")
    with Image.open(p) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def _val_iou(net: MicroNet, images: np.ndarray, labels: np.ndarray, batch_size: int) -> float:
    if len(images) == 0:
        return float("nan")
    scores = []
    for start in range(0, len(images), batch_size):
        logits = net.forward_batch(images[start:start + batch_size])
        pred = logits > 0.0  # sigmoid(l) >= 0.5 exactly when l >= 0
        for i in range(len(logits)):
            scores.append(_binary_iou(pred[i], labels[start + i] > 0))
    return float(np.mean(scores))


def train(
    manifest,
    cfg: TrainConfig,
    checkpoint_path=None,
    metrics_path=None,
) -> tuple[MicroNet, list[dict]]:
    """Train the network on a dataset manifest.

    ``manifest`` is either a path to a ``dataset.jsonl`` file or an already
    loaded sequence of manifest records. When ``cfg.mix_ratio`` is set, the
    per-frame supervision kind is reassigned with
    :func:`roadseg.datastore.apply_mix` first; otherwise the records are
    used exactly as given. Every epoch runs seeded shuffled mini-batches,
    optionally flipping items left-right with probability 0.5, and logs the
    mean training loss plus the validation IoU against dense masks.

    Returns the trained network and the per-epoch metrics. A NaN loss
    aborts with a FloatingPointError naming the epoch and batch.
    """
    if isinstance(manifest, (str, Path)):
        records = datastore.load_manifest(manifest)
    else:
        records = list(manifest)
    if not records:
        raise ValueError("training manifest is empty")
    if cfg.mix_ratio is not None:
        records = datastore.apply_mix(records, datastore.MixPlan(cfg.mix_ratio, cfg.seed))
    train_records = [r for r in records if r.split == datastore.SPLIT_TRAIN]
    val_records = [r for r in records if r.split == datastore.SPLIT_VAL
                   and r.kind == datastore.KIND_DENSE]
    if not train_records:
        raise ValueError("no training records in manifest")
    data = _TrainArrays(train_records)
    val_images = np.stack([_load_image(r.image) for r in val_records]) if val_records else np.zeros((0,))
    val_labels = np.stack([load_mask_png(r.gt) for r in val_records]) if val_records else np.zeros((0,))

    rng = np.random.default_rng(cfg.seed)
    net = MicroNet(rng=rng)
    opt = AdamState(net.parameters())
    schedule = LrSchedule(cfg.lr_initial, cfg.lr_final, cfg.epochs)
    n = len(data)
    metrics: list[dict] = []

    for epoch in range(cfg.epochs):
        lr = schedule.lr(epoch)
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if cfg.augment else np.zeros(n, dtype=bool)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            bsz = len(idx)
            x, y, m, counts = data.gather(idx, flips[start:start + bsz])
            logits = net.forward_batch(x)
            probs = sigmoid(logits)
            values, grads64 = masked_bce_planes(probs, y, m, counts)
            batch_loss_sum = float(values.sum())
            if not math.isfinite(batch_loss_sum):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            grads = net.backward_batch((grads64 / bsz).astype(np.float32))
            adam_step(net, grads, opt, lr)
            loss_sum += batch_loss_sum
        train_loss = loss_sum / n
        val_iou = _val_iou(net, val_images, val_labels, cfg.batch_size) if len(val_records) else float("nan")
        metrics.append({"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_iou": val_iou})

    if checkpoint_path is not None:
        save_checkpoint(net, checkpoint_path)
    if metrics_path is not None:
        write_metrics_csv(metrics, metrics_path)
    return net, metrics


def write_metrics_csv(metrics: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr", "train_loss", "val_iou"])
        for row in metrics:
            writer.writerow([row["epoch"], repr(row["lr"]), repr(row["train_loss"]), repr(row["val_iou"])])
