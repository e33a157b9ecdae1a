import numpy as np
import pytest

from app.schemas import AugKind, AugPolicy, IntensityPreset, MixMode
from app.utils.augment import (
    InfeasibleMixMode,
    LabeledBatch,
    ShapeMismatch,
    apply_policy,
    augment_image,
    bilinear_resize,
    check_mix_feasible,
    cjitter,
    cutmix,
    feasible_pairs,
    hflip,
    mix_images,
    mixup,
    rcrop,
    sample_crop_box,
    sample_mix_pairs,
)
from app.utils.rng import rng_new


def image(seed: int, size: int = 8) -> np.ndarray:
    return rng_new(seed).uniform(size=(size, size, 3)).astype(np.float32)


# ─── Single-image ──────────────────────────────────────────────────────────
def test_hflip_mirrors_columns():
    img = image(0)
    flipped = hflip(img, rng_new(0), flip=True)
    assert np.array_equal(flipped[:, 0], img[:, -1])
    assert np.array_equal(hflip(flipped, rng_new(0), flip=True), img)
    assert np.array_equal(hflip(img, rng_new(0), flip=False), img)


def test_bilinear_resize_keeps_constant_images_constant():
    img = np.full((5, 7, 3), 0.25, dtype=np.float32)
    out = bilinear_resize(img, 8, 8)
    assert out.shape == (8, 8, 3)
    assert np.allclose(out, 0.25)
    same = image(1)
    assert np.array_equal(bilinear_resize(same, 8, 8), same)


def test_crop_boxes_stay_inside_the_image():
    rng = rng_new(3)
    for scale in ((0.01, 1.0), (0.9, 1.0)):
        for _ in range(50):
            top, left, bottom, right = sample_crop_box(8, 8, scale, (0.75, 1.33), rng)
            assert 0 <= top < bottom <= 8
            assert 0 <= left < right <= 8


def test_rcrop_full_box_is_identity():
    img = image(2)
    out = rcrop(img, (0.08, 1.0), (0.75, 1.33), 8, rng_new(0), box=(0, 0, 8, 8))
    assert np.array_equal(out, img)
    assert rcrop(img, (0.08, 1.0), (0.75, 1.33), 8, rng_new(0)).shape == (8, 8, 3)


def test_hflip_flips_about_half_the_time():
    img = np.array([[[0.0], [1.0]]], dtype=np.float32)
    rng = rng_new(11)
    flips = sum(int(hflip(img, rng)[0, 0, 0] == 1.0) for _ in range(10_000))
    assert 0.47 <= flips / 10_000 <= 0.53


def test_rcrop_of_an_aligned_block_returns_it_exactly():
    img = image(6, size=4)
    out = rcrop(img, (0.08, 1.0), (0.75, 1.33), 2, rng_new(0), box=(0, 0, 2, 2))
    assert np.array_equal(out, img[:2, :2])


def test_cjitter_brightness_scales_pixels():
    pixel = np.full((1, 1, 3), 0.5, dtype=np.float32)
    out = cjitter(pixel, (0.6, 1.4), rng_new(0), factors=(1.4, 1.0, 1.0), order=(0, 1, 2))
    assert np.allclose(out, 0.7)


def test_cjitter_unit_factors_are_identity():
    img = image(4)
    out = cjitter(img, (0.6, 1.4), rng_new(0), factors=(1.0, 1.0, 1.0), order=(0, 1, 2))
    assert np.allclose(out, img)


def test_cjitter_zero_saturation_is_grey():
    out = cjitter(image(5), (0.6, 1.4), rng_new(0), factors=(1.0, 1.0, 0.0), order=(2, 0, 1))
    assert np.allclose(out[..., 0], out[..., 1], atol=1e-6)
    assert np.allclose(out[..., 1], out[..., 2], atol=1e-6)


def test_augment_image_is_deterministic_and_bounded():
    policy = AugPolicy.build(AugKind.BASE_AUG, IntensityPreset.STRONGER)
    img = image(6)
    a = augment_image(policy, img, 8, rng_new(1).fork("item:0"))
    b = augment_image(policy, img, 8, rng_new(1).fork("item:0"))
    assert np.array_equal(a, b)
    assert a.shape == img.shape and a.dtype == img.dtype
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_none_policy_passes_batch_through():
    batch = LabeledBatch.plain(np.stack([image(i) for i in range(3)]), [0, 1, 2])
    assert apply_policy(AugPolicy(), batch, rng_new(0)) is batch


def test_augment_image_refuses_mixing_kinds():
    with pytest.raises(InfeasibleMixMode):
        augment_image(AugPolicy.build(AugKind.MIXUP), image(0), 8, rng_new(0))


# ─── Mixing ────────────────────────────────────────────────────────────────
def test_mixup_lambda_one_returns_first_image_bit_exact():
    x1, x2 = image(1), image(2)
    sample = mixup(x1, 0, x2, 1, rng_new(0), lam=1.0)
    assert np.array_equal(sample.image, x1)
    assert sample.weight_a == 1.0 and sample.weight_b == 0.0


def test_mixup_of_an_image_with_itself_is_a_fixed_point():
    x = image(3)
    for lam in (0.0, 0.3, 0.77):
        assert np.array_equal(mixup(x, 2, x, 2, rng_new(0), lam=lam).image, x)


def test_cutmix_weight_is_the_kept_pixel_fraction():
    x1 = np.zeros((8, 8, 3), dtype=np.float32)
    x2 = np.ones((8, 8, 3), dtype=np.float32)
    pinned = cutmix(x1, 0, x2, 1, rng_new(0), box=(1, 2, 4, 6))
    assert pinned.weight_a == 1.0 - 12 / 64

    rng = rng_new(8)
    for i in range(40):
        sample = cutmix(x1, 0, x2, 1, rng.fork(f"item:{i}"))
        pasted = int(np.count_nonzero(sample.image[..., 0] == 1.0))
        assert sample.weight_a == 1.0 - pasted / 64


def test_mixing_rejects_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        mixup(image(0, 8), 0, image(1, 6), 1, rng_new(0))
    with pytest.raises(ShapeMismatch):
        cutmix(image(0, 8), 0, image(1, 6), 1, rng_new(0))


def test_mix_images_dispatch():
    with pytest.raises(ValueError):
        mix_images(AugPolicy.build(AugKind.HFLIP), image(0), 0, image(1), 1, rng_new(0))


# ─── Pairing ───────────────────────────────────────────────────────────────
LABELS = [0, 0, 1, 1, 2, 2]


def test_within_and_between_pairs_respect_classes():
    labels = np.array(LABELS)
    rng = rng_new(2)
    for i, j in sample_mix_pairs(labels, MixMode.W, 200, rng.fork("w")):
        assert labels[i] == labels[j] and i != j
    for i, j in sample_mix_pairs(labels, MixMode.B, 200, rng.fork("b")):
        assert labels[i] != labels[j]


def test_unconstrained_pairs_hit_the_same_class_rate():
    labels = np.repeat(np.arange(5), 5)
    pairs = sample_mix_pairs(labels, MixMode.WB, 10_000, rng_new(4))
    same = sum(labels[i] == labels[j] for i, j in pairs)
    assert 0.13 <= same / 10_000 <= 0.21


def test_feasible_pair_counts():
    assert len(feasible_pairs(LABELS, MixMode.WB)) == 6 * 5
    assert len(feasible_pairs(LABELS, MixMode.WB, include_self=True)) == 36
    assert len(feasible_pairs(LABELS, MixMode.W, include_self=True)) == 3 * 4
    assert len(feasible_pairs(LABELS, MixMode.B)) == 36 - 12


def test_within_class_mixing_needs_two_shots():
    with pytest.raises(InfeasibleMixMode):
        check_mix_feasible([0, 1, 2, 3, 4], MixMode.W)
    with pytest.raises(InfeasibleMixMode):
        check_mix_feasible([3, 3, 3], MixMode.B)
    with pytest.raises(InfeasibleMixMode):
        check_mix_feasible([0], MixMode.WB)
    check_mix_feasible([0, 1, 2, 3, 4], MixMode.B)


def test_apply_policy_mixes_from_the_pool():
    images = np.stack([image(i) for i in range(6)])
    batch = LabeledBatch.plain(images, LABELS)
    policy = AugPolicy.build(AugKind.MIXUP, mix_mode=MixMode.W)
    mixed = apply_policy(policy, batch, rng_new(4))
    assert len(mixed) == len(batch)
    assert np.array_equal(mixed.label_a, mixed.label_b)
    assert np.all((mixed.weight_a >= 0) & (mixed.weight_a <= 1))


def test_per_epoch_params_share_one_draw():
    images = np.stack([image(0)] * 3)
    batch = LabeledBatch.plain(images, [0, 1, 2])
    policy = AugPolicy.build(AugKind.RCROP, IntensityPreset.STRONGER)
    shared = apply_policy(policy, batch, rng_new(5), params_rng=rng_new(5).fork("params"))
    assert np.array_equal(shared.images[0], shared.images[1])
    assert np.array_equal(shared.images[1], shared.images[2])
