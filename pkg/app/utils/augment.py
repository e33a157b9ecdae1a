# app/utils/augment.py
"""
Image augmentation on H x W x C float32 images with values in [0, 1].

Every random choice comes from the ``RngStream`` handed in. Each operation
also accepts an explicit override (``flip``, ``box``, ``factors``/``order``,
``lam``) so a caller can pin the random part.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.errors import LabError
from app.schemas import CROP_RATIO, PRESET_RANGES, AugKind, AugPolicy, IntensityPreset, MixMode
from app.utils.rng import RngStream, beta_1_1
from app.utils.tensor import Tensor

LUMA = np.array([0.299, 0.587, 0.114])
CROP_ATTEMPTS = 10

Box = Tuple[int, int, int, int]  # top, left, bottom, right (exclusive)


class ShapeMismatch(LabError, ValueError):
    """Raised when two images that must be combined differ in shape."""


class InfeasibleMixMode(LabError, ValueError):
    """Raised when a pool cannot supply any pair for the requested mixing mode."""


@dataclass(frozen=True)
class MixSample:
    image: Tensor
    label_a: int
    label_b: int
    weight_a: float

    @property
    def weight_b(self) -> float:
        return 1.0 - self.weight_a


@dataclass(frozen=True)
class LabeledBatch:
    """A batch of images with (possibly mixed) targets. Plain batches have weight_a == 1."""

    images: Tensor  # N x H x W x C
    label_a: np.ndarray
    label_b: np.ndarray
    weight_a: np.ndarray

    @classmethod
    def plain(cls, images: Tensor, labels: Sequence[int]) -> "LabeledBatch":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(images, labels, labels.copy(), np.ones(len(labels)))

    @classmethod
    def from_samples(cls, samples: List[MixSample]) -> "LabeledBatch":
        return cls(
            np.stack([s.image for s in samples]),
            np.array([s.label_a for s in samples], dtype=np.int64),
            np.array([s.label_b for s in samples], dtype=np.int64),
            np.array([s.weight_a for s in samples], dtype=np.float64),
        )

    @property
    def is_mixed(self) -> bool:
        return bool(np.any(self.weight_a != 1.0))

    def __len__(self) -> int:
        return len(self.label_a)

    def samples(self) -> List[MixSample]:
        return [
            MixSample(self.images[i], int(self.label_a[i]), int(self.label_b[i]), float(self.weight_a[i]))
            for i in range(len(self))
        ]


# ─── Single-image techniques ───────────────────────────────────────────────
def hflip(img: Tensor, rng: RngStream, flip: Optional[bool] = None, prob: float = 0.5) -> Tensor:
    if flip is None:
        flip = bool(rng.uniform() < prob)
    return img[:, ::-1, :].copy() if flip else img.copy()


def bilinear_resize(img: Tensor, out_h: int, out_w: int) -> Tensor:
    """Half-pixel-centred bilinear resize (align_corners=False) with edge clamping."""
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()

    def axis(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(in_h, out_h)
    x0, x1, wx = axis(in_w, out_w)
    src = img.astype(np.float64)
    top = src[y0][:, x0] * (1 - wx)[None, :, None] + src[y0][:, x1] * wx[None, :, None]
    bottom = src[y1][:, x0] * (1 - wx)[None, :, None] + src[y1][:, x1] * wx[None, :, None]
    out = top * (1 - wy)[:, None, None] + bottom * wy[:, None, None]
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def sample_crop_box(
    height: int, width: int, scale: Tuple[float, float], ratio: Tuple[float, float], rng: RngStream
) -> Box:
    """Random-resized-crop box; falls back to the centred largest in-ratio crop."""
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(CROP_ATTEMPTS):
        target_area = area * float(rng.uniform(scale[0], scale[1]))
        aspect = math.exp(float(rng.uniform(*log_ratio)))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, top + h, left + w

    in_ratio = width / height
    if in_ratio < ratio[0]:
        w = width
        h = int(round(w / ratio[0]))
    elif in_ratio > ratio[1]:
        h = height
        w = int(round(h * ratio[1]))
    else:
        w, h = width, height
    top = (height - h) // 2
    left = (width - w) // 2
    return top, left, top + h, left + w


def rcrop(
    img: Tensor,
    scale: Tuple[float, float],
    ratio: Tuple[float, float],
    out_hw: int,
    rng: RngStream,
    box: Optional[Box] = None,
) -> Tensor:
    if out_hw < 1:
        raise ValueError(f"out_hw must be >= 1, got {out_hw}")
    if box is None:
        box = sample_crop_box(img.shape[0], img.shape[1], scale, ratio, rng)
    top, left, bottom, right = box
    return bilinear_resize(img[top:bottom, left:right], out_hw, out_hw)


def luma(img: Tensor) -> np.ndarray:
    return img.astype(np.float64) @ LUMA


def cjitter(
    img: Tensor,
    jitter: Tuple[float, float],
    rng: RngStream,
    factors: Optional[Sequence[float]] = None,
    order: Optional[Sequence[int]] = None,
) -> Tensor:
    """Brightness, contrast and saturation jitter applied in a per-image random order."""
    if factors is None:
        factors = rng.uniform(jitter[0], jitter[1], size=3)
    if order is None:
        order = rng.permutation(3)
    out = img.astype(np.float64)
    for prop in order:
        f = float(factors[prop])
        if prop == 0:  # brightness
            out = out * f
        elif prop == 1:  # contrast
            grey = luma(out).mean()
            out = f * out + (1.0 - f) * grey
        else:  # saturation
            out = f * out + (1.0 - f) * luma(out)[..., None]
        out = np.clip(out, 0.0, 1.0)
    return out.astype(img.dtype)


def base_aug(img: Tensor, preset: IntensityPreset, out_hw: int, rng: RngStream) -> Tensor:
    scale, jitter = PRESET_RANGES[IntensityPreset(preset)]
    out = hflip(img, rng)
    out = rcrop(out, scale, CROP_RATIO, out_hw, rng)
    return cjitter(out, jitter, rng)


# ─── Mixing techniques ─────────────────────────────────────────────────────
def _check_pair(x1: Tensor, x2: Tensor) -> None:
    if x1.shape != x2.shape:
        raise ShapeMismatch(f"cannot mix images of shape {x1.shape} and {x2.shape}")


def mixup(x1: Tensor, y1: int, x2: Tensor, y2: int, rng: RngStream, lam: Optional[float] = None) -> MixSample:
    _check_pair(x1, x2)
    if lam is None:
        lam = beta_1_1(rng)
    mixed = lam * x1.astype(np.float64) + (1.0 - lam) * x2.astype(np.float64)
    # x1 == x2 is a fixed point for every lambda
    mixed = np.where(x1 == x2, x1, mixed)
    return MixSample(np.clip(mixed, 0.0, 1.0).astype(x1.dtype), int(y1), int(y2), float(lam))


def cutmix_box(height: int, width: int, lam: float, rng: RngStream) -> Box:
    cut = math.sqrt(1.0 - lam)
    cut_h, cut_w = int(round(height * cut)), int(round(width * cut))
    cy, cx = int(rng.integers(0, height)), int(rng.integers(0, width))
    top = int(np.clip(cy - cut_h // 2, 0, height))
    left = int(np.clip(cx - cut_w // 2, 0, width))
    bottom = int(np.clip(cy - cut_h // 2 + cut_h, 0, height))
    right = int(np.clip(cx - cut_w // 2 + cut_w, 0, width))
    return top, left, bottom, right


def cutmix(
    x1: Tensor,
    y1: int,
    x2: Tensor,
    y2: int,
    rng: RngStream,
    lam: Optional[float] = None,
    box: Optional[Box] = None,
) -> MixSample:
    """Paste a box of x2 onto x1; weight_a is 1 minus the exact pasted-pixel fraction."""
    _check_pair(x1, x2)
    height, width = x1.shape[:2]
    if box is None:
        if lam is None:
            lam = beta_1_1(rng)
        box = cutmix_box(height, width, lam, rng)
    top, left, bottom, right = box
    out = x1.copy()
    out[top:bottom, left:right] = x2[top:bottom, left:right]
    pasted = max(bottom - top, 0) * max(right - left, 0)
    return MixSample(out, int(y1), int(y2), 1.0 - pasted / (height * width))


# ─── Pairing ───────────────────────────────────────────────────────────────
def check_mix_feasible(labels: Sequence[int], mode: MixMode) -> None:
    labels = np.asarray(labels)
    if len(labels) < 2:
        raise InfeasibleMixMode(f"mixing needs at least 2 examples, pool has {len(labels)}")
    _, counts = np.unique(labels, return_counts=True)
    if mode == MixMode.W and counts.max() < 2:
        raise InfeasibleMixMode(
            "within-class mixing (W) needs at least two examples sharing a class (k > 1)"
        )
    if mode == MixMode.B and len(counts) < 2:
        raise InfeasibleMixMode("between-class mixing (B) needs at least two distinct classes")


def feasible_pairs(labels: Sequence[int], mode: MixMode, include_self: bool = False) -> np.ndarray:
    """All ordered (i, j) pairs allowed by `mode`, as an M x 2 array in row-major order."""
    labels = np.asarray(labels)
    n = len(labels)
    allowed = np.ones((n, n), dtype=bool)
    if not include_self:
        np.fill_diagonal(allowed, False)
    same = labels[:, None] == labels[None, :]
    if mode == MixMode.W:
        allowed &= same
    elif mode == MixMode.B:
        allowed &= ~same
    return np.argwhere(allowed)


def sample_mix_pairs(labels: Sequence[int], mode: MixMode, count: int, rng: RngStream) -> List[Tuple[int, int]]:
    mode = MixMode(mode)
    check_mix_feasible(labels, mode)
    pairs = feasible_pairs(labels, mode)
    picks = rng.integers(0, len(pairs), size=count)
    return [(int(pairs[p, 0]), int(pairs[p, 1])) for p in picks]


# ─── Policy dispatch ───────────────────────────────────────────────────────
def augment_image(policy: AugPolicy, img: Tensor, out_hw: int, rng: RngStream) -> Tensor:
    kind = policy.kind
    if kind == AugKind.NONE:
        return img.copy()
    if kind == AugKind.HFLIP:
        return hflip(img, rng, prob=policy.flip_prob)
    if kind == AugKind.RCROP:
        return rcrop(img, policy.crop_scale, policy.crop_ratio, out_hw, rng)
    if kind == AugKind.CJITTER:
        return cjitter(img, policy.jitter_range, rng)
    if kind == AugKind.BASE_AUG:
        out = hflip(img, rng, prob=policy.flip_prob)
        out = rcrop(out, policy.crop_scale, policy.crop_ratio, out_hw, rng)
        return cjitter(out, policy.jitter_range, rng)
    raise InfeasibleMixMode(f"{kind.value} mixes two images; use mix_images")


def mix_images(policy: AugPolicy, x1: Tensor, y1: int, x2: Tensor, y2: int, rng: RngStream, lam: Optional[float] = None) -> MixSample:
    if policy.kind == AugKind.MIXUP:
        return mixup(x1, y1, x2, y2, rng, lam=lam)
    if policy.kind == AugKind.CUTMIX:
        return cutmix(x1, y1, x2, y2, rng, lam=lam)
    raise ValueError(f"{policy.kind.value} is not a mixing augmentation")


def apply_policy(
    policy: AugPolicy,
    batch: LabeledBatch,
    rng: RngStream,
    pool: Optional[LabeledBatch] = None,
    params_rng: Optional[RngStream] = None,
) -> LabeledBatch:
    """
    Augment a labeled batch.

    Single-image kinds map each image independently. Mixing kinds replace the
    batch with len(batch) MixSamples whose pairs come from `pool` (the batch
    itself by default). `params_rng`, when given, makes every image reuse the
    same parameter draw.
    """
    if len(batch) == 0:
        raise ValueError("cannot augment an empty batch")
    if policy.kind == AugKind.NONE:
        return batch

    def item_rng(i: int) -> RngStream:
        return params_rng.fork("item") if params_rng is not None else rng.fork(f"item:{i}")

    out_hw = batch.images.shape[1]
    if not policy.kind.is_mixing:
        images = np.stack([augment_image(policy, img, out_hw, item_rng(i)) for i, img in enumerate(batch.images)])
        return LabeledBatch(images, batch.label_a, batch.label_b, batch.weight_a)

    pool = pool if pool is not None else batch
    pairs = sample_mix_pairs(pool.label_a, policy.mix_mode, len(batch), rng.fork("pairs"))
    samples = [
        mix_images(policy, pool.images[i], int(pool.label_a[i]), pool.images[j], int(pool.label_a[j]), item_rng(n))
        for n, (i, j) in enumerate(pairs)
    ]
    return LabeledBatch.from_samples(samples)
