# app/network.py
"""
The desk-scale network: a conv/BN feature extractor f with a linear head h.

    stem:    conv3x3 (3 -> C) + BN + ReLU
    block i: conv3x3 (C_i -> 2 C_i) + BN + ReLU + 2x2 average pool
    head:    global average pool -> feature vector -> linear classifier

Activations are NCHW internally; images arrive NHWC. Every op computes in the
dtype of the parameters, so a float64 copy of a model (``to_dtype``) is the
verification mode used for gradient checks.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax, softmax

from app.errors import LabError
from app.schemas import NetworkConfig, UpdateMode
from app.utils.augment import LabeledBatch
from app.utils.binio import TruncatedStream, read_exact, read_f32, read_struct, write_f32
from app.utils.rng import RngStream
from app.utils.tensor import STORAGE_DTYPE, Tensor

logger = logging.getLogger("fewshot_lab.network")

CHECKPOINT_MAGIC = b"FTM1"
CLASSIFIER_GROUPS = ("classifier.weight", "classifier.bias")


class BatchTooSmall(LabError, ValueError):
    """Raised when train-mode batch norm gets fewer than two samples."""


class LabelOutOfRange(LabError, ValueError):
    """Raised when a target label falls outside the head's classes."""


class InvalidUpdateMode(LabError, ValueError):
    """Raised when an update mode cannot be mapped onto the network."""


class ParameterMismatch(LabError, ValueError):
    """Raised when two parameter sets do not share an architecture."""


class CheckpointFormatError(LabError, ValueError):
    """Raised when a checkpoint file is malformed or truncated."""


# ─── Parameter groups ──────────────────────────────────────────────────────
def stage_names(blocks: int) -> List[str]:
    return ["stem"] + [f"block{i}" for i in range(1, blocks + 1)]


def stage_groups(stage: str) -> Tuple[str, str, str]:
    return f"{stage}.conv", f"{stage}.bn.scale", f"{stage}.bn.shift"


def group_names(blocks: int) -> List[str]:
    """ParamGroupIndex: depth order, stem first, classifier last."""
    names: List[str] = []
    for stage in stage_names(blocks):
        names.extend(stage_groups(stage))
    names.extend(CLASSIFIER_GROUPS)
    return names


def buffer_names(blocks: int) -> List[str]:
    names: List[str] = []
    for stage in stage_names(blocks):
        names.extend((f"{stage}.bn.running_mean", f"{stage}.bn.running_var"))
    return names


# ─── Model containers ──────────────────────────────────────────────────────
@dataclass
class FeatureExtractor:
    config: NetworkConfig
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return self.params["stem.conv"].dtype

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def copy(self) -> "FeatureExtractor":
        return FeatureExtractor(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def to_dtype(self, dtype) -> "FeatureExtractor":
        return FeatureExtractor(
            self.config,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )


@dataclass
class LinearHead:
    weight: np.ndarray  # n_classes x dim
    bias: np.ndarray  # n_classes

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "LinearHead":
        return LinearHead(self.weight.copy(), self.bias.copy())

    def to_dtype(self, dtype) -> "LinearHead":
        return LinearHead(self.weight.astype(dtype), self.bias.astype(dtype))


@dataclass
class Classifier:
    """h o f: the extractor plus a linear head."""

    extractor: FeatureExtractor
    head: LinearHead

    @property
    def blocks(self) -> int:
        return self.extractor.config.blocks

    def parameters(self) -> Dict[str, np.ndarray]:
        """Live references to every trainable array, in ParamGroupIndex order."""
        params = {name: self.extractor.params[name] for name in group_names(self.blocks)[:-2]}
        params["classifier.weight"] = self.head.weight
        params["classifier.bias"] = self.head.bias
        return params

    def copy(self) -> "Classifier":
        return Classifier(self.extractor.copy(), self.head.copy())

    def to_dtype(self, dtype) -> "Classifier":
        return Classifier(self.extractor.to_dtype(dtype), self.head.to_dtype(dtype))


def _uniform(rng: RngStream, bound: float, shape, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_extractor(cfg: NetworkConfig, rng: RngStream, dtype=STORAGE_DTYPE) -> FeatureExtractor:
    params: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}
    c_in, c_out = cfg.in_channels, cfg.stem_channels
    for stage in stage_names(cfg.blocks):
        conv, scale, shift = stage_groups(stage)
        fan_in = c_in * 9
        params[conv] = _uniform(rng.fork(conv), 1.0 / np.sqrt(fan_in), (c_out, c_in, 3, 3), dtype)
        params[scale] = np.ones(c_out, dtype=dtype)
        params[shift] = np.zeros(c_out, dtype=dtype)
        buffers[f"{stage}.bn.running_mean"] = np.zeros(c_out, dtype=dtype)
        buffers[f"{stage}.bn.running_var"] = np.ones(c_out, dtype=dtype)
        c_in, c_out = c_out, c_out * 2
    return FeatureExtractor(cfg, params, buffers)


def init_head(dim: int, n_classes: int, rng: RngStream, dtype=STORAGE_DTYPE) -> LinearHead:
    if dim < 1 or n_classes < 1:
        raise ValueError(f"head needs dim >= 1 and n_classes >= 1, got {dim}, {n_classes}")
    bound = 1.0 / np.sqrt(dim)
    weight = _uniform(rng.fork("weight"), bound, (n_classes, dim), dtype)
    bias = _uniform(rng.fork("bias"), bound, (n_classes,), dtype)
    return LinearHead(weight, bias)


# ─── Layer math ────────────────────────────────────────────────────────────
def _im2col(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))  # N,C,H,W,3,3
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv_forward(x: np.ndarray, weight: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n, _, h, w = x.shape
    c_out = weight.shape[0]
    cols = _im2col(x)
    out = cols @ weight.reshape(c_out, -1).T
    return out.reshape(n, h, w, c_out).transpose(0, 3, 1, 2), cols


def conv_backward(dout: np.ndarray, cols: np.ndarray, weight: np.ndarray, x_shape, need_dx: bool = True):
    n, c, h, w = x_shape
    c_out = weight.shape[0]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dweight = (dmat.T @ cols).reshape(weight.shape)
    if not need_dx:
        return None, dweight
    dcols = (dmat @ weight.reshape(c_out, -1)).reshape(n, h, w, c, 3, 3)
    dpadded = np.zeros((n, c, h + 2, w + 2), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dpadded[:, :, i : i + h, j : j + w] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dpadded[:, :, 1:-1, 1:-1], dweight


_BN_AXES = (0, 2, 3)


def _per_channel(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None]


def bn_forward(x, scale, shift, running_mean, running_var, train: bool, momentum: float, eps: float):
    """Returns (y, xhat, inv_std, new_running_mean, new_running_var). Batch variance is biased (1/n)."""
    if train:
        mean = x.mean(axis=_BN_AXES)
        var = x.var(axis=_BN_AXES)
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * var
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - _per_channel(mean)) * _per_channel(inv_std)
    y = _per_channel(scale) * xhat + _per_channel(shift)
    return y, xhat, inv_std, new_mean.astype(x.dtype), new_var.astype(x.dtype)


def bn_backward(dy, xhat, inv_std, scale, train: bool):
    dshift = dy.sum(axis=_BN_AXES)
    dscale = (dy * xhat).sum(axis=_BN_AXES)
    dxhat = dy * _per_channel(scale)
    if not train:
        return dxhat * _per_channel(inv_std), dscale, dshift
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dx = _per_channel(inv_std / m) * (
        m * dxhat
        - _per_channel(dxhat.sum(axis=_BN_AXES))
        - xhat * _per_channel((dxhat * xhat).sum(axis=_BN_AXES))
    )
    return dx, dscale, dshift


def avgpool2_forward(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2_backward(dy: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) * dy.dtype.type(0.25)


# ─── Forward / backward ────────────────────────────────────────────────────
@dataclass
class StageCache:
    name: str
    x_shape: Tuple[int, ...]
    cols: Optional[np.ndarray]
    xhat: np.ndarray
    inv_std: np.ndarray
    bn_train: bool
    relu_mask: np.ndarray
    pooled: bool


@dataclass
class ForwardCache:
    model: Classifier
    stages: List[StageCache]
    last_shape: Tuple[int, ...]
    features: np.ndarray
    logits: np.ndarray


@dataclass
class ForwardResult:
    features: np.ndarray
    logits: np.ndarray
    cache: ForwardCache
    running_stats: Dict[str, np.ndarray] = field(default_factory=dict)


def stage_trainable(stage: str, mask: Optional[Dict[str, bool]]) -> bool:
    if mask is None:
        return True
    return any(mask[g] for g in stage_groups(stage))


def _to_nchw(images: Tensor, dtype) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2), dtype=dtype)


def extract_features(
    extractor: FeatureExtractor,
    images: Tensor,
    bn_train: Sequence[bool],
    keep: Sequence[bool],
) -> Tuple[np.ndarray, List[StageCache], Tuple[int, ...], Dict[str, np.ndarray]]:
    cfg = extractor.config
    x = _to_nchw(images, extractor.dtype)
    if any(bn_train) and x.shape[0] < 2:
        raise BatchTooSmall("train-mode batch norm needs a batch of at least 2 images")
    caches: List[StageCache] = []
    running: Dict[str, np.ndarray] = {}
    for idx, stage in enumerate(stage_names(cfg.blocks)):
        conv, scale, shift = stage_groups(stage)
        x_shape = x.shape
        z, cols = conv_forward(x, extractor.params[conv])
        y, xhat, inv_std, new_mean, new_var = bn_forward(
            z,
            extractor.params[scale],
            extractor.params[shift],
            extractor.buffers[f"{stage}.bn.running_mean"],
            extractor.buffers[f"{stage}.bn.running_var"],
            bool(bn_train[idx]),
            cfg.bn_momentum,
            cfg.bn_eps,
        )
        if bn_train[idx]:
            running[f"{stage}.bn.running_mean"] = new_mean
            running[f"{stage}.bn.running_var"] = new_var
        mask = y > 0
        x = y * mask
        pooled = stage != "stem"
        if pooled:
            x = avgpool2_forward(x)
        caches.append(
            StageCache(stage, x_shape, cols if keep[idx] else None, xhat, inv_std, bool(bn_train[idx]), mask, pooled)
        )
    features = x.mean(axis=(2, 3))
    return features, caches, x.shape, running


EMBED_CHUNK = 256


def embed(extractor: FeatureExtractor, images: Tensor, chunk: int = EMBED_CHUNK) -> np.ndarray:
    """Eval-mode features, computed in fixed-size chunks."""
    n_stages = extractor.config.blocks + 1
    off = [False] * n_stages
    parts = [
        extract_features(extractor, images[start : start + chunk], off, off)[0]
        for start in range(0, len(images), chunk)
    ]
    if not parts:
        return np.zeros((0, extractor.feature_dim), dtype=extractor.dtype)
    return np.concatenate(parts)


def forward(
    model: Classifier,
    images: Tensor,
    mode: str = "eval",
    mask: Optional[Dict[str, bool]] = None,
) -> ForwardResult:
    """
    Train mode: batch-norm of every trainable stage uses batch statistics and
    reports updated running stats in ``running_stats`` (momentum 0.1); frozen
    stages stay in eval mode. Eval mode uses running stats everywhere and is a
    pure function of (parameters, running stats, input).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    stages = stage_names(model.blocks)
    trainable = [stage_trainable(s, mask) for s in stages]
    bn_train = [mode == "train" and t for t in trainable]
    keep = [mode == "train" and any(trainable[: i + 1]) for i in range(len(stages))]
    features, caches, last_shape, running = extract_features(model.extractor, images, bn_train, keep)
    logits = features @ model.head.weight.T + model.head.bias
    cache = ForwardCache(model, caches, last_shape, features, logits)
    return ForwardResult(features, logits, cache, running)


def forward_head(model: Classifier, features: np.ndarray) -> ForwardResult:
    """Head-only forward on precomputed features (frozen extractor)."""
    features = np.asarray(features, dtype=model.head.weight.dtype)
    logits = features @ model.head.weight.T + model.head.bias
    return ForwardResult(features, logits, ForwardCache(model, [], features.shape, features, logits))


def commit_running_stats(model: Classifier, result: ForwardResult) -> None:
    model.extractor.buffers.update(result.running_stats)


def _targets(targets: Union[LabeledBatch, Sequence[int]]) -> LabeledBatch:
    if isinstance(targets, LabeledBatch):
        return targets
    labels = np.asarray(targets, dtype=np.int64)
    return LabeledBatch(None, labels, labels.copy(), np.ones(len(labels)))


def mixed_cross_entropy(logits: np.ndarray, targets: Union[LabeledBatch, Sequence[int]]) -> Tuple[float, np.ndarray]:
    """Mean of weight_a * CE(label_a) + (1 - weight_a) * CE(label_b); returns (loss, dlogits)."""
    t = _targets(targets)
    n, n_classes = logits.shape
    for labels in (t.label_a, t.label_b):
        if len(labels) != n:
            raise ValueError(f"{len(labels)} targets for {n} logits")
        if np.any(labels < 0) or np.any(labels >= n_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {n_classes}), got {labels.tolist()}")
    rows = np.arange(n)
    weight_a = t.weight_a.astype(logits.dtype)
    logp = log_softmax(logits, axis=1)
    per_sample = -(weight_a * logp[rows, t.label_a] + (1 - weight_a) * logp[rows, t.label_b])
    loss = float(per_sample.mean())
    target_dist = np.zeros_like(logits)
    target_dist[rows, t.label_a] += weight_a
    target_dist[rows, t.label_b] += 1 - weight_a
    dlogits = (softmax(logits, axis=1) - target_dist) / n
    return loss, dlogits


def loss_and_backward(
    cache: ForwardCache,
    targets: Union[LabeledBatch, Sequence[int]],
    mask: Optional[Dict[str, bool]] = None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    model = cache.model
    params = model.parameters()
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    live = (lambda g: True) if mask is None else (lambda g: mask[g])

    loss, dlogits = mixed_cross_entropy(cache.logits, targets)
    if live("classifier.weight"):
        grads["classifier.weight"] = dlogits.T @ cache.features
    if live("classifier.bias"):
        grads["classifier.bias"] = dlogits.sum(axis=0)

    stages = cache.stages
    trainable = [stage_trainable(s.name, mask) for s in stages]
    if not any(trainable):
        return loss, grads
    if any(s.cols is None for s, t in zip(stages, trainable) if t):
        raise ValueError("backward needs a train-mode forward cache")
    lowest = trainable.index(True)

    dfeat = dlogits @ model.head.weight
    n, c, h, w = cache.last_shape
    dx = np.broadcast_to(dfeat[:, :, None, None] / (h * w), cache.last_shape).astype(dfeat.dtype)
    for idx in range(len(stages) - 1, lowest - 1, -1):
        sc = stages[idx]
        conv, scale, shift = stage_groups(sc.name)
        if sc.pooled:
            dx = avgpool2_backward(dx)
        dx = dx * sc.relu_mask
        dz, dscale, dshift = bn_backward(dx, sc.xhat, sc.inv_std, params[scale], sc.bn_train)
        dx, dweight = conv_backward(dz, sc.cols, params[conv], sc.x_shape, need_dx=idx > lowest)
        if live(conv):
            grads[conv] = dweight
        if live(scale):
            grads[scale] = dscale
        if live(shift):
            grads[shift] = dshift
    return loss, grads


# ─── Optimiser ─────────────────────────────────────────────────────────────
@dataclass
class OptState:
    lr: float
    momentum: float
    weight_decay: float
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    opt: OptState,
    mask: Optional[Dict[str, bool]] = None,
) -> None:
    """In-place SGD with momentum; weight decay is added to the gradient. Frozen groups are skipped."""
    for name, p in params.items():
        if mask is not None and not mask[name]:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ParameterMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        g = g + p.dtype.type(opt.weight_decay) * p
        buf = opt.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p)
        buf = p.dtype.type(opt.momentum) * buf + g
        opt.buffers[name] = buf
        p -= p.dtype.type(opt.lr) * buf


# ─── Update modes ──────────────────────────────────────────────────────────
def freeze_mask(mode: UpdateMode, blocks: int = 3, epoch: Optional[int] = None) -> Dict[str, bool]:
    """
    Trainable flag per group. LP: classifier only. FT: everything.
    Partial(d): classifier plus the last d blocks; Partial(0) is LP and FT is
    Partial(blocks) plus the stem.
    """
    if mode.kind == "TwoStage":
        if epoch is None:
            raise InvalidUpdateMode("TwoStage needs an epoch to pick its stage")
        mode = mode.stage_for_epoch(epoch)
    names = group_names(blocks)
    if mode.kind == "FT":
        return {name: True for name in names}
    depth = 0 if mode.kind == "LP" else mode.depth
    if not 0 <= depth <= blocks:
        raise InvalidUpdateMode(f"Partial depth must lie in [0, {blocks}], got {depth}")
    live_stages = {f"block{i}" for i in range(blocks - depth + 1, blocks + 1)}
    mask = {}
    for name in names:
        stage = name.split(".")[0]
        mask[name] = name in CLASSIFIER_GROUPS or stage in live_stages
    return mask


def layer_diff(a: Dict[str, np.ndarray], b: Dict[str, np.ndarray]) -> Dict[str, float]:
    """Per-group L1 distance, in the order of `a`."""
    if list(a) != list(b):
        raise ParameterMismatch(f"parameter groups differ: {list(a)} vs {list(b)}")
    diffs = {}
    for name, pa in a.items():
        pb = b[name]
        if pa.shape != pb.shape:
            raise ParameterMismatch(f"{name}: shape {pa.shape} vs {pb.shape}")
        diffs[name] = float(np.abs(pa.astype(np.float64) - pb.astype(np.float64)).sum())
    return diffs


# ─── Checkpoints ───────────────────────────────────────────────────────────
def save_checkpoint(path: Union[str, Path], extractor: FeatureExtractor, head: Optional[LinearHead] = None) -> None:
    groups: List[Tuple[str, np.ndarray]] = []
    for name in group_names(extractor.config.blocks)[:-2]:
        groups.append((name, extractor.params[name]))
    if head is not None:
        groups.extend((("classifier.weight", head.weight), ("classifier.bias", head.bias)))
    for name in buffer_names(extractor.config.blocks):
        groups.append((name, extractor.buffers[name]))

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in groups:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.size))
            write_f32(fh, arr)


def load_checkpoint(
    path: Union[str, Path], input_size: int = 32
) -> Tuple[FeatureExtractor, Optional[LinearHead]]:
    """Inverse of save_checkpoint; shapes are rebuilt from group names and element counts."""
    flat: Dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        try:
            if read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
                raise CheckpointFormatError(f"{path}: not an FTM1 checkpoint (bad magic)")
            while True:
                head = fh.read(2)
                if not head:
                    break
                if len(head) != 2:
                    raise TruncatedStream("truncated group header")
                (name_len,) = struct.unpack("<H", head)
                name = read_exact(fh, name_len, "group name").decode("utf-8")
                (count,) = read_struct(fh, "<I", f"{name} element count")
                flat[name] = read_f32(fh, count, name)
        except (TruncatedStream, UnicodeDecodeError) as e:
            raise CheckpointFormatError(f"{path}: {e}") from e

    try:
        stem = flat["stem.conv"]
        stem_bn = flat["stem.bn.scale"]
    except KeyError as e:
        raise CheckpointFormatError(f"{path}: missing group {e}") from e
    stem_channels = stem_bn.size
    in_channels = stem.size // (stem_channels * 9)
    blocks = sum(1 for name in flat if name.startswith("block") and name.endswith(".conv"))
    cfg = NetworkConfig(
        in_channels=in_channels, stem_channels=stem_channels, blocks=blocks, input_size=input_size
    )

    params: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}
    c_in, c_out = in_channels, stem_channels
    try:
        for stage in stage_names(blocks):
            conv, scale, shift = stage_groups(stage)
            params[conv] = flat[conv].reshape(c_out, c_in, 3, 3)
            params[scale] = flat[scale].reshape(c_out)
            params[shift] = flat[shift].reshape(c_out)
            for stat in ("running_mean", "running_var"):
                key = f"{stage}.bn.{stat}"
                buffers[key] = flat[key].reshape(c_out)
            c_in, c_out = c_out, c_out * 2
    except (KeyError, ValueError) as e:
        raise CheckpointFormatError(f"{path}: inconsistent groups ({e})") from e

    head = None
    if "classifier.weight" in flat or "classifier.bias" in flat:
        try:
            bias = flat["classifier.bias"]
            head = LinearHead(flat["classifier.weight"].reshape(bias.size, cfg.feature_dim), bias)
        except (KeyError, ValueError) as e:
            raise CheckpointFormatError(f"{path}: incomplete classifier ({e})") from e
    logger.info(f"Loaded checkpoint {path} ({blocks} blocks, feature dim {cfg.feature_dim})")
    return FeatureExtractor(cfg, params, buffers), head
