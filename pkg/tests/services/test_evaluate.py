import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.special import softmax

from app.network import Classifier
from app.schemas import AugKind, AugPolicy, EpisodeResult, EpisodeSpec, IntensityPreset, TrainTrace, TtaConfig
from app.services.evaluate import (
    EmptyTrace,
    aggregate,
    best_epoch_histogram,
    best_of,
    compare_reports,
    expected_gain,
    predict,
    predict_logits,
    predict_tta,
    summary_extras,
    v_measure_analysis,
)
from app.services.finetune import episode_head
from app.utils.augment import augment_image
from app.utils.datasets import sample_episode
from app.utils.reporting import write_csv
from app.utils.rng import rng_new


@pytest.fixture
def model(tiny_extractor):
    return Classifier(tiny_extractor, episode_head(tiny_extractor, 3, rng_new(0)))


@pytest.fixture
def queries():
    return rng_new(3).uniform(size=(6, 8, 8, 3)).astype(np.float32)


def result(episode_id: int, acc: float, best_epoch: int = 1, gain: float = 1.0) -> EpisodeResult:
    return EpisodeResult(
        episode_id=episode_id,
        acc_last=acc,
        acc_best=acc,
        best_epoch=best_epoch,
        v_measure_pre=0.2,
        v_measure_post=0.4,
        expected_gain=gain,
        layer_diffs={"classifier.bias": 1.0},
        config_hash="abc",
    )


# ─── Prediction / TTA ──────────────────────────────────────────────────────
def test_tta_with_one_view_is_plain_prediction(model, queries):
    tta = TtaConfig(policy=AugPolicy.build(AugKind.BASE_AUG), v=1)
    assert np.array_equal(predict_tta(model, queries, tta, rng_new(0)), predict(model, queries))
    none = TtaConfig(policy=AugPolicy(), v=8)
    assert np.array_equal(predict_tta(model, queries, none, rng_new(0)), predict(model, queries))


def test_tta_is_deterministic_per_stream(model, queries):
    tta = TtaConfig(policy=AugPolicy.build(AugKind.BASE_AUG, IntensityPreset.STRONG), v=4)
    a = predict_tta(model, queries, tta, rng_new(1).fork("tta"))
    b = predict_tta(model, queries, tta, rng_new(1).fork("tta"))
    assert np.array_equal(a, b)
    assert a.shape == (6,) and set(a.tolist()) <= {0, 1, 2}
    logits = TtaConfig(policy=tta.policy, v=4, space="logits")
    assert predict_tta(model, queries, logits, rng_new(1).fork("tta")).shape == (6,)


def test_tta_averages_the_softmax_of_every_view(tiny_extractor):
    model = Classifier(tiny_extractor, episode_head(tiny_extractor, 2, rng_new(5)))
    images = rng_new(8).uniform(size=(20, 8, 8, 3)).astype(np.float32)
    tta = TtaConfig(policy=AugPolicy.build(AugKind.BASE_AUG, IntensityPreset.STRONGER), v=3)
    rng = rng_new(2).fork("tta")

    views = [images]
    for j in (1, 2):
        view_rngs = [rng.fork(f"query:{i}").fork(f"view:{j}") for i in range(len(images))]
        views.append(np.stack([augment_image(tta.policy, img, 8, r) for img, r in zip(images, view_rngs)]))
    probs = [softmax(predict_logits(model, v).astype(np.float64), axis=1) for v in views]
    expected = np.argmax((probs[0] + probs[1] + probs[2]) / 3, axis=1)

    assert np.array_equal(predict_tta(model, images, tta, rng), expected)


def test_tta_rejects_mixing_policies():
    with pytest.raises(ValidationError):
        TtaConfig(policy=AugPolicy.build(AugKind.MIXUP))


def test_v_measure_is_unchanged_by_an_untouched_extractor(tiny_extractor, tiny_dataset):
    episode = sample_episode(tiny_dataset, EpisodeSpec(n=3, k=1, k_q=5), rng_new(2))
    pre, post = v_measure_analysis(tiny_extractor, tiny_extractor.copy(), episode, rng_new(2))
    assert pre == post
    assert 0.0 <= pre <= 1.0


# ─── Statistics ────────────────────────────────────────────────────────────
def test_expected_gain_is_at_least_one():
    rng = rng_new(4)
    for i in range(30):
        accs = rng.fork(f"trace:{i}").integers(1, 16, size=10) / 15
        assert expected_gain(TrainTrace(losses=[0.0] * 10, accuracies=accs.tolist())) >= 1.0


def test_expected_gain_edge_cases():
    assert expected_gain(TrainTrace(losses=[1, 1], accuracies=[0.5, 0.25])) == pytest.approx(2.0)
    assert expected_gain(TrainTrace(losses=[1, 1], accuracies=[0.0, 0.0])) == 1.0
    assert math.isinf(expected_gain(TrainTrace(losses=[1, 1], accuracies=[0.2, 0.0])))
    with pytest.raises(EmptyTrace):
        expected_gain(TrainTrace())


def test_best_of_counts_the_final_accuracy():
    trace = TrainTrace(losses=[1, 1, 1], accuracies=[0.4, 0.8, 0.6])
    assert best_of(trace, 0.6) == (0.8, 2)
    assert best_of(trace, 0.9) == (0.9, 3)
    assert best_of(TrainTrace(), 0.5) == (0.5, 0)


def test_aggregate():
    assert aggregate([0.7]) == (0.7, 0.0)
    mean, ci95 = aggregate([0.5, 0.7])
    assert mean == pytest.approx(0.6)
    assert ci95 == pytest.approx(1.96 * math.sqrt(0.02) / math.sqrt(2))
    with pytest.raises(ValueError):
        aggregate([])


def test_best_epoch_histogram():
    rows = [result(i, 0.5, best_epoch=e) for i, e in enumerate((1, 10, 11, 50, 100, 100))]
    assert best_epoch_histogram(rows, 100) == [2, 1, 0, 0, 1, 0, 0, 0, 0, 2]
    assert best_epoch_histogram(rows[:1], 3) == [1, 0, 0]
    assert best_epoch_histogram(rows, 0) == []


def test_summary_extras_separates_infinite_gains():
    rows = [result(0, 0.5, gain=1.5), result(1, 0.7, gain=math.inf), result(2, 0.6, gain=2.5)]
    extras = summary_extras(rows, 10)
    assert extras["expected_gain"] == {"mean_finite": 2.0, "infinite": 1}
    assert extras["mean_v_pre"] == pytest.approx(0.2)
    assert extras["mean_layer_diff"] == {"classifier.bias": 1.0}


def test_episode_result_requires_best_at_least_last():
    with pytest.raises(ValidationError):
        EpisodeResult(
            episode_id=0,
            acc_last=0.6,
            acc_best=0.5,
            best_epoch=1,
            v_measure_pre=0,
            v_measure_post=0,
            expected_gain=1,
            layer_diffs={},
            config_hash="",
        )


# ─── Paired comparison ─────────────────────────────────────────────────────
def test_compare_reports_pairs_by_episode(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_csv(a, ["episode_id", "acc_last"], [{"episode_id": i, "acc_last": v} for i, v in enumerate((0.5, 0.6, 0.7))])
    write_csv(b, ["episode_id", "acc_last"], [{"episode_id": i, "acc_last": v} for i, v in enumerate((0.6, 0.6, 0.9, 1.0))])
    out = compare_reports(str(a), str(b))
    assert out["episodes"] == 3
    assert out["mean_diff"] == pytest.approx(0.1)
    assert out["b_wins"] == pytest.approx(2 / 3)
    assert out["ties"] == pytest.approx(1 / 3)

    empty = tmp_path / "none.csv"
    write_csv(empty, ["episode_id", "acc_last"], [{"episode_id": 9, "acc_last": 0.1}])
    with pytest.raises(ValueError):
        compare_reports(str(a), str(empty))
