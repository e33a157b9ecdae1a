# app/services/intensity.py
"""
Augmentation intensity: the mean feature-space Euclidean distance between
original and augmented images, measured through a frozen (eval-mode)
extractor on a fixed subset S of the source data.

    single:  mean over x in S of  ||f(x) - f(Aug(x))||
    mixing:  mean over pairs (x1, x2) in S x S of
             ( ||f(x1) - f(mix)|| + ||f(x2) - f(mix)|| ) / 2

Sums run through math.fsum in index order, so the result does not depend on
chunking.
"""

import hashlib
import logging
import math
from pathlib import Path
from typing import List, Union

import numpy as np

from app.errors import LabError
from app.network import FeatureExtractor, embed
from app.schemas import AugKind, AugPolicy, IntensityConfig, IntensityReport, MixMode
from app.utils.augment import augment_image, check_mix_feasible, feasible_pairs, mix_images
from app.utils.datasets import Dataset
from app.utils.reporting import config_hash
from app.utils.rng import RngStream, rng_new

logger = logging.getLogger("fewshot_lab.intensity")

PAIR_CHUNK = 512


class IntensityError(LabError, ValueError):
    pass


class IntensityPolicyError(IntensityError):
    pass


def extractor_id(checkpoint: Union[str, Path]) -> str:
    """Short content hash of a checkpoint file."""
    return hashlib.sha256(Path(checkpoint).read_bytes()).hexdigest()[:12]


def draw_subset(ds: Dataset, cfg: IntensityConfig) -> Dataset:
    """S: subset_size images drawn without replacement, seeded by subset_seed alone."""
    if cfg.subset_size > len(ds):
        raise IntensityError(f"subset of {cfg.subset_size} requested from {len(ds)} images")
    order = rng_new(cfg.subset_seed).fork("subset").permutation(len(ds))
    return ds.subset(np.sort(order[: cfg.subset_size]))


def _features(extractor: FeatureExtractor, images: np.ndarray, normalize: bool) -> np.ndarray:
    feats = embed(extractor, images).astype(np.float64)
    if normalize:
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = feats / np.where(norms > 0, norms, 1.0)
    return feats


def _report(policy: AugPolicy, cfg: IntensityConfig, value: float, n_terms: int, ext_id: str, seed: int, mode: str):
    return IntensityReport(
        policy=policy.kind.value,
        preset=policy.preset.value,
        mode=mode,
        value=value,
        n_terms=n_terms,
        extractor_id=ext_id,
        config_hash=config_hash(
            {"policy": policy.model_dump(mode="json"), "intensity": cfg.model_dump(mode="json"), "seed": seed}
        ),
        seed=seed,
    )


def intensity_single(
    policy: AugPolicy,
    extractor: FeatureExtractor,
    subset: Dataset,
    cfg: IntensityConfig,
    rng: RngStream,
    ext_id: str = "",
    seed: int = 0,
) -> IntensityReport:
    if policy.kind.is_mixing:
        raise IntensityPolicyError(f"{policy.kind.value} mixes two images; use intensity_mixing")
    images = subset.images
    if policy.kind == AugKind.NONE:
        augmented = images
    else:
        out_hw = images.shape[1]
        augmented = np.stack(
            [augment_image(policy, img, out_hw, rng.fork(f"image:{i}")) for i, img in enumerate(images)]
        )
    base = _features(extractor, images, cfg.normalize)
    aug = _features(extractor, augmented, cfg.normalize)
    distances = np.linalg.norm(base - aug, axis=1)
    value = math.fsum(distances) / len(distances)
    logger.info(f"intensity {policy.kind.value}/{policy.preset.value}: {value:.6g} over {len(distances)} images")
    return _report(policy, cfg, value, len(distances), ext_id, seed, "-")


def mixing_pairs(labels: np.ndarray, mode: MixMode, cfg: IntensityConfig, rng: RngStream) -> np.ndarray:
    """Every feasible ordered pair of S x S (diagonal included), or `cfg.pairs` of them drawn uniformly."""
    pairs = feasible_pairs(labels, mode, include_self=True)
    if cfg.pairs is None:
        return pairs
    picks = rng.fork("pairs").integers(0, len(pairs), size=cfg.pairs)
    return pairs[picks]


def intensity_mixing(
    policy: AugPolicy,
    extractor: FeatureExtractor,
    subset: Dataset,
    cfg: IntensityConfig,
    rng: RngStream,
    ext_id: str = "",
    seed: int = 0,
) -> IntensityReport:
    if not policy.kind.is_mixing:
        raise IntensityPolicyError(f"{policy.kind.value} is a single-image augmentation; use intensity_single")
    images, labels = subset.images, subset.labels
    if policy.mix_mode != MixMode.WB:
        check_mix_feasible(labels, policy.mix_mode)
    pairs = mixing_pairs(labels, policy.mix_mode, cfg, rng)
    base = _features(extractor, images, cfg.normalize)

    summands: List[float] = []
    for start in range(0, len(pairs), PAIR_CHUNK):
        chunk = pairs[start : start + PAIR_CHUNK]
        for draw in range(cfg.lambda_draws):
            mixed = np.stack(
                [
                    mix_images(
                        policy,
                        images[i],
                        int(labels[i]),
                        images[j],
                        int(labels[j]),
                        rng.fork(f"pair:{start + p}").fork(f"draw:{draw}"),
                        lam=cfg.fixed_lambda,
                    ).image
                    for p, (i, j) in enumerate(chunk)
                ]
            )
            fm = _features(extractor, mixed, cfg.normalize)
            d1 = np.linalg.norm(base[chunk[:, 0]] - fm, axis=1)
            d2 = np.linalg.norm(base[chunk[:, 1]] - fm, axis=1)
            summands.extend(((d1 + d2) / 2).tolist())
    value = math.fsum(summands) / len(summands)
    logger.info(
        f"intensity {policy.kind.value}/{policy.mix_mode.value}: {value:.6g} over {len(summands)} terms"
    )
    return _report(policy, cfg, value, len(summands), ext_id, seed, policy.mix_mode.value)


def intensity(
    policy: AugPolicy,
    extractor: FeatureExtractor,
    subset: Dataset,
    cfg: IntensityConfig,
    rng: RngStream,
    ext_id: str = "",
    seed: int = 0,
) -> IntensityReport:
    run = intensity_mixing if policy.kind.is_mixing else intensity_single
    return run(policy, extractor, subset, cfg, rng, ext_id=ext_id, seed=seed)


def expand_policies(kinds: List[AugKind], preset, mix_modes: List[MixMode]) -> List[AugPolicy]:
    """Expand kinds into policies: one per kind, mixing kinds once per mode."""
    policies = []
    for kind in kinds:
        modes = mix_modes if AugKind(kind).is_mixing else [MixMode.WB]
        for mode in modes:
            policies.append(AugPolicy.build(kind, preset, mode))
    return policies
