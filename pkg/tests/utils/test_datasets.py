import struct

import numpy as np
import pytest

from app.errors import ConfigError
from app.schemas import EpisodeSpec, SynthConfig
from app.utils.datasets import (
    SYNTH_PRESETS,
    DatasetFormatError,
    EpisodeSamplingError,
    generate_synthetic,
    load_dataset,
    sample_episode,
    save_dataset,
    synth_preset,
)
from app.utils.rng import rng_new


def test_synthetic_shape_range_and_balance(tiny_dataset, tiny_synth):
    assert tiny_dataset.images.shape == (72, 8, 8, 3)
    assert tiny_dataset.images.dtype == np.float32
    assert tiny_dataset.images.min() >= 0.0 and tiny_dataset.images.max() <= 1.0
    assert tiny_dataset.class_counts.tolist() == [12] * 6
    assert tiny_dataset.domain_tag == "tiny"


def test_synthetic_is_reproducible(tiny_synth, tiny_dataset):
    again = generate_synthetic(tiny_synth, rng_new(0).fork("data").fork("tiny"))
    assert np.array_equal(again.images, tiny_dataset.images)
    other = generate_synthetic(tiny_synth, rng_new(1).fork("data").fork("tiny"))
    assert not np.array_equal(other.images, tiny_dataset.images)


def test_source_preset_is_learnable_by_nearest_centroid():
    ds = generate_synthetic(synth_preset("source-a"), rng_new(0).fork("data").fork("source-a"))
    flat = ds.images.reshape(len(ds), -1).astype(np.float64)
    per_class = len(ds) // ds.n_classes
    fit = np.arange(len(ds)) % per_class < per_class // 2
    centroids = np.stack([flat[fit & (ds.labels == c)].mean(axis=0) for c in range(ds.n_classes)])
    held_out = flat[~fit]
    distances = (centroids**2).sum(axis=1)[None, :] - 2.0 * held_out @ centroids.T
    accuracy = np.mean(distances.argmin(axis=1) == ds.labels[~fit])
    assert accuracy > 0.8


def test_presets():
    assert set(SYNTH_PRESETS) == {"source-a", "target-shifted", "target-near"}
    assert synth_preset("target-shifted").channel_order == (2, 0, 1)
    with pytest.raises(ConfigError):
        synth_preset("imagenet")


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(freq_band=(4.0, 1.0))
    with pytest.raises(ValueError):
        SynthConfig(channel_order=(0, 0, 1))


# ─── Episodes ──────────────────────────────────────────────────────────────
def test_episode_shapes_and_disjoint_splits(tiny_dataset):
    spec = EpisodeSpec(n=3, k=2, k_q=4)
    ep = sample_episode(tiny_dataset, spec, rng_new(2))
    assert ep.n_way == 3
    assert ep.support.images.shape == (6, 8, 8, 3)
    assert ep.query.images.shape == (12, 8, 8, 3)
    assert ep.support.label_a.tolist() == [0, 0, 1, 1, 2, 2]
    assert ep.query.label_a.tolist() == [0] * 4 + [1] * 4 + [2] * 4
    assert not set(ep.support_index.tolist()) & set(ep.query_index.tolist())
    for original, local in ep.class_map.items():
        assert np.all(tiny_dataset.labels[ep.support_index[ep.support.label_a == local]] == original)
        assert np.all(tiny_dataset.labels[ep.query_index[ep.query.label_a == local]] == original)


def test_episode_sampling_is_deterministic(tiny_dataset):
    spec = EpisodeSpec(n=3, k=1, k_q=2)
    a = sample_episode(tiny_dataset, spec, rng_new(5).fork("sample"))
    b = sample_episode(tiny_dataset, spec, rng_new(5).fork("sample"))
    assert np.array_equal(a.support_index, b.support_index)
    assert a.class_map == b.class_map


def test_episode_sampling_errors(tiny_dataset):
    with pytest.raises(EpisodeSamplingError):
        sample_episode(tiny_dataset, EpisodeSpec(n=7, k=1, k_q=1), rng_new(0))
    with pytest.raises(EpisodeSamplingError):
        sample_episode(tiny_dataset, EpisodeSpec(n=2, k=10, k_q=3), rng_new(0))


# ─── FSDS ──────────────────────────────────────────────────────────────────
def test_fsds_round_trip(tmp_path, tiny_dataset):
    path = tmp_path / "tiny.fsds"
    save_dataset(tiny_dataset, path)
    assert path.stat().st_size == 28 + 72 * 4 + 72 * 8 * 8 * 3 * 4
    loaded = load_dataset(path)
    assert np.array_equal(loaded.images, tiny_dataset.images)
    assert np.array_equal(loaded.labels, tiny_dataset.labels)
    assert loaded.n_classes == 6
    assert loaded.domain_tag == "tiny"


def test_fsds_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.fsds"
    path.write_bytes(struct.pack("<4sIIIIII", b"NOPE", 1, 0, 8, 8, 3, 2))
    with pytest.raises(DatasetFormatError, match="magic"):
        load_dataset(path)


def test_fsds_rejects_truncation_and_trailing_bytes(tmp_path, tiny_dataset):
    path = tmp_path / "tiny.fsds"
    save_dataset(tiny_dataset, path)
    raw = path.read_bytes()

    path.write_bytes(raw[:-5])
    with pytest.raises(DatasetFormatError, match="truncated"):
        load_dataset(path)

    path.write_bytes(raw + b"\x00")
    with pytest.raises(DatasetFormatError, match="trailing"):
        load_dataset(path)


def test_fsds_rejects_out_of_range_labels(tmp_path):
    path = tmp_path / "labels.fsds"
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIIIII", b"FSDS", 1, 1, 2, 2, 3, 2))
        fh.write(np.array([5], dtype="<u4").tobytes())
        fh.write(np.zeros(12, dtype="<f4").tobytes())
    with pytest.raises(DatasetFormatError, match="outside"):
        load_dataset(path)
