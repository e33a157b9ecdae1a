# app/utils/datasets.py
"""
Datasets, the n-way k-shot episode sampler, procedural synthetic presets and
the FSDS dataset file format.

FSDS layout (little-endian):
    magic "FSDS" | version u32 = 1 | n_images u32 | height u32 | width u32
    | channels u32 | n_classes u32          (28-byte header)
    then n_images labels (u32), then n_images * H * W * C pixels (f32, HWC).
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Union

import numpy as np

from app.errors import ConfigError, LabError
from app.schemas import EpisodeSpec, SynthConfig
from app.utils.augment import LabeledBatch
from app.utils.binio import TruncatedStream, read_f32, read_struct, read_u32, write_f32, write_u32
from app.utils.rng import RngStream
from app.utils.tensor import STORAGE_DTYPE, Tensor

logger = logging.getLogger("fewshot_lab.datasets")

FSDS_MAGIC = b"FSDS"
FSDS_VERSION = 1
FSDS_HEADER = "<4sIIIIII"


class DatasetFormatError(LabError, ValueError):
    pass


class EpisodeSamplingError(LabError, ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: Tensor  # N x H x W x C, float32 in [0, 1]
    labels: np.ndarray
    n_classes: int
    domain_tag: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.n_classes, self.domain_tag)


@dataclass(frozen=True)
class Episode:
    support: LabeledBatch
    query: LabeledBatch
    class_map: Dict[int, int]
    support_index: np.ndarray = field(repr=False)
    query_index: np.ndarray = field(repr=False)

    @property
    def n_way(self) -> int:
        return len(self.class_map)


# ─── Synthetic presets ─────────────────────────────────────────────────────
SYNTH_PRESETS: Dict[str, SynthConfig] = {
    "source-a": SynthConfig(name="source-a", n_classes=20, per_class=100, freq_band=(1.0, 4.0)),
    "target-shifted": SynthConfig(
        name="target-shifted",
        n_classes=20,
        per_class=40,
        freq_band=(5.0, 9.0),
        color_scale=(1.3, 0.8, 0.6),
        channel_order=(2, 0, 1),
    ),
    "target-near": SynthConfig(name="target-near", n_classes=20, per_class=40, freq_band=(2.0, 5.0)),
}


def synth_preset(name: str) -> SynthConfig:
    try:
        return SYNTH_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown dataset preset '{name}' (choose from {', '.join(SYNTH_PRESETS)})") from None


def _prototype(cfg: SynthConfig, rng: RngStream) -> np.ndarray:
    size = cfg.image_size
    grid = np.arange(size, dtype=np.float64) / size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    channels = []
    for ch in range(3):
        crng = rng.fork(f"channel:{ch}")
        freqs = crng.uniform(cfg.freq_band[0], cfg.freq_band[1], size=cfg.components)
        angles = crng.uniform(0.0, 2 * np.pi, size=cfg.components)
        phases = crng.uniform(0.0, 2 * np.pi, size=cfg.components)
        wave = np.zeros((size, size))
        for f, theta, phi in zip(freqs, angles, phases):
            wave += np.sin(2 * np.pi * f * (np.cos(theta) * xx + np.sin(theta) * yy) + phi)
        lo, hi = wave.min(), wave.max()
        wave = (wave - lo) / (hi - lo) if hi > lo else np.zeros_like(wave)
        channels.append(0.2 + 0.6 * wave)
    proto = np.stack(channels, axis=-1)
    proto = 0.5 + (proto - 0.5) * np.asarray(cfg.color_scale)
    return np.clip(proto[..., list(cfg.channel_order)], 0.0, 1.0)


def generate_synthetic(cfg: SynthConfig, rng: RngStream) -> Dataset:
    """Class prototypes of summed 2-D sinusoids, sampled with shift, brightness and noise."""
    size, r = cfg.image_size, cfg.translate_radius
    images = np.empty((cfg.n_classes * cfg.per_class, size, size, 3), dtype=STORAGE_DTYPE)
    labels = np.repeat(np.arange(cfg.n_classes, dtype=np.int64), cfg.per_class)
    for c in range(cfg.n_classes):
        crng = rng.fork(f"class:{c}")
        proto = _prototype(cfg, crng.fork("prototype"))
        srng = crng.fork("samples")
        shifts = srng.integers(-r, r + 1, size=(cfg.per_class, 2))
        gains = srng.uniform(cfg.brightness[0], cfg.brightness[1], size=cfg.per_class)
        noise = srng.normal(cfg.noise_sigma, size=(cfg.per_class, size, size, 3))
        for i in range(cfg.per_class):
            sample = np.roll(proto, shift=tuple(shifts[i]), axis=(0, 1)) * gains[i] + noise[i]
            images[c * cfg.per_class + i] = np.clip(sample, 0.0, 1.0)
    logger.info(f"Generated '{cfg.name}': {cfg.n_classes} classes x {cfg.per_class} images")
    return Dataset(images, labels, cfg.n_classes, cfg.name)


# ─── Episodes ──────────────────────────────────────────────────────────────
def sample_episode(ds: Dataset, spec: EpisodeSpec, rng: RngStream) -> Episode:
    need = spec.k + spec.k_q
    counts = ds.class_counts
    if ds.n_classes < spec.n:
        raise EpisodeSamplingError(f"{spec.n}-way episode needs {spec.n} classes, dataset has {ds.n_classes}")
    short = [c for c in range(ds.n_classes) if counts[c] < need]
    if short:
        raise EpisodeSamplingError(
            f"classes {short} have fewer than k + k_q = {need} examples (smallest: {int(counts[short].min())})"
        )

    classes = rng.permutation(ds.n_classes)[: spec.n]
    support_idx, query_idx = [], []
    for local, cls in enumerate(classes):
        members = np.flatnonzero(ds.labels == cls)
        chosen = members[rng.permutation(len(members))[:need]]
        support_idx.append(chosen[: spec.k])
        query_idx.append(chosen[spec.k :])
    class_map = {int(cls): local for local, cls in enumerate(classes)}

    support_index = np.concatenate(support_idx)
    query_index = np.concatenate(query_idx)
    support = LabeledBatch.plain(ds.images[support_index], np.repeat(np.arange(spec.n), spec.k))
    query = LabeledBatch.plain(ds.images[query_index], np.repeat(np.arange(spec.n), spec.k_q))
    return Episode(support, query, class_map, support_index, query_index)


# ─── FSDS I/O ──────────────────────────────────────────────────────────────
def save_dataset(ds: Dataset, path: Union[str, Path]) -> None:
    n, h, w, c = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(FSDS_HEADER, FSDS_MAGIC, FSDS_VERSION, n, h, w, c, ds.n_classes))
        write_u32(fh, ds.labels)
        write_f32(fh, ds.images)


def load_dataset(path: Union[str, Path], domain_tag: str = "") -> Dataset:
    with open(path, "rb") as fh:
        try:
            magic, version, n, h, w, c, n_classes = read_struct(fh, FSDS_HEADER, "header")
            if magic != FSDS_MAGIC:
                raise DatasetFormatError(f"{path}: bad magic {magic!r}, expected {FSDS_MAGIC!r}")
            if version != FSDS_VERSION:
                raise DatasetFormatError(f"{path}: unsupported FSDS version {version}")
            labels = read_u32(fh, n, "labels")
            pixels = read_f32(fh, n * h * w * c, "pixels")
        except TruncatedStream as e:
            raise DatasetFormatError(f"{path}: {e}") from e
        if fh.read(1):
            raise DatasetFormatError(f"{path}: trailing bytes after pixel block")
    if n and labels.max() >= n_classes:
        raise DatasetFormatError(f"{path}: label {int(labels.max())} outside [0, {n_classes})")
    images = pixels.reshape(n, h, w, c)
    return Dataset(images, labels, int(n_classes), domain_tag or Path(path).stem)
