# app/services/evaluate.py
import logging
import math
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.special import softmax

from app.errors import LabError
from app.network import Classifier, FeatureExtractor, embed, forward_head
from app.schemas import AugKind, EpisodeResult, TrainTrace, TtaConfig
from app.utils.augment import augment_image
from app.utils.clustering import kmeans, v_measure
from app.utils.datasets import Episode
from app.utils.reporting import read_csv
from app.utils.rng import RngStream

logger = logging.getLogger("fewshot_lab.evaluate")


class EmptyTrace(LabError, ValueError):
    pass


class TtaPolicyError(LabError, ValueError):
    pass


# ─── Prediction ────────────────────────────────────────────────────────────
def predict_logits(model: Classifier, images: np.ndarray) -> np.ndarray:
    return forward_head(model, embed(model.extractor, images)).logits


def predict(model: Classifier, images: np.ndarray) -> np.ndarray:
    """Eval-mode argmax; np.argmax breaks ties toward the lowest class index."""
    return np.argmax(predict_logits(model, images), axis=1)


def predict_tta(model: Classifier, images: np.ndarray, tta: TtaConfig, rng: RngStream) -> np.ndarray:
    """
    Average the original prediction with v - 1 augmented views per query
    image (softmax probabilities by default, raw logits with space=logits).
    View j of query i draws from rng/"query:i"/"view:j".
    """
    if tta.policy.kind.is_mixing:
        raise TtaPolicyError(f"TTA needs a single-image augmentation, got {tta.policy.kind.value}")
    if tta.v == 1 or tta.policy.kind == AugKind.NONE:
        return predict(model, images)

    def scores(batch: np.ndarray) -> np.ndarray:
        logits = predict_logits(model, batch).astype(np.float64)
        return logits if tta.space == "logits" else softmax(logits, axis=1)

    out_hw = images.shape[1]
    query_rngs = [rng.fork(f"query:{i}") for i in range(len(images))]
    total = scores(images)
    for j in range(1, tta.v):
        views = np.stack(
            [augment_image(tta.policy, img, out_hw, query_rngs[i].fork(f"view:{j}")) for i, img in enumerate(images)]
        )
        total = total + scores(views)
    return np.argmax(total / tta.v, axis=1)


# ─── Clustering analysis ───────────────────────────────────────────────────
def v_measure_analysis(
    pretrained: FeatureExtractor,
    finetuned: FeatureExtractor,
    episode: Episode,
    rng: RngStream,
) -> Tuple[float, float]:
    """K-means (K = n) on eval-mode query features of each extractor; both runs share rng/"cluster"."""
    truth = episode.query.label_a
    k = episode.n_way
    scores = []
    for extractor in (pretrained, finetuned):
        features = embed(extractor, episode.query.images)
        clusters = kmeans(features, k, rng.fork("cluster"))
        scores.append(v_measure(truth, clusters))
    return scores[0], scores[1]


# ─── Episode statistics ────────────────────────────────────────────────────
def expected_gain(trace: TrainTrace) -> float:
    """Best-epoch over last-epoch accuracy; inf flags a zero last accuracy with a non-zero best."""
    if not trace.accuracies:
        raise EmptyTrace("expected gain needs at least one recorded epoch")
    best, last = max(trace.accuracies), trace.accuracies[-1]
    if last == 0:
        return 1.0 if best == 0 else math.inf
    return best / last


def best_of(trace: TrainTrace, acc_last: float) -> Tuple[float, int]:
    """(acc_best, best_epoch) over the per-epoch trace with acc_last standing in for the final epoch."""
    accs = list(trace.accuracies)
    if not accs:
        return acc_last, 0
    accs[-1] = max(accs[-1], acc_last)
    best = max(accs)
    return best, accs.index(best) + 1


def aggregate(values: Sequence[float]) -> Tuple[float, float]:
    """(mean, ci95) with ci95 = 1.96 * sample std / sqrt(E); a single value has ci95 0."""
    if not values:
        raise ValueError("aggregate needs at least one value")
    e = len(values)
    mean = math.fsum(values) / e
    if e == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (e - 1)
    return mean, 1.96 * math.sqrt(var) / math.sqrt(e)


def best_epoch_histogram(results: Sequence[EpisodeResult], epochs: int, bins: int = 10) -> List[int]:
    """Episode counts per equal-width bucket of the best epoch (1..epochs)."""
    if epochs < 1:
        return []
    bins = min(bins, epochs)
    counts = [0] * bins
    for r in results:
        if r.best_epoch >= 1:
            counts[min((r.best_epoch - 1) * bins // epochs, bins - 1)] += 1
    return counts


def summary_extras(results: Sequence[EpisodeResult], epochs: int) -> Dict[str, object]:
    gains = [r.expected_gain for r in results]
    finite = [g for g in gains if math.isfinite(g)]
    e = len(results)
    layer_groups = list(results[0].layer_diffs) if results else []
    return {
        "expected_gain": {
            "mean_finite": math.fsum(finite) / len(finite) if finite else None,
            "infinite": len(gains) - len(finite),
        },
        "best_epoch_histogram": best_epoch_histogram(results, epochs),
        "mean_acc_best": math.fsum(r.acc_best for r in results) / e,
        "mean_v_pre": math.fsum(r.v_measure_pre for r in results) / e,
        "mean_v_post": math.fsum(r.v_measure_post for r in results) / e,
        "mean_layer_diff": {g: math.fsum(r.layer_diffs[g] for r in results) / e for g in layer_groups},
    }


# ─── Paired comparison ─────────────────────────────────────────────────────
def compare_reports(a_csv: str, b_csv: str) -> Dict[str, object]:
    """Paired acc_last difference (b - a) over the episode ids two result CSVs share."""
    a = {row["episode_id"]: float(row["acc_last"]) for row in read_csv(a_csv)}
    b = {row["episode_id"]: float(row["acc_last"]) for row in read_csv(b_csv)}
    shared = sorted(set(a) & set(b), key=int)
    if not shared:
        raise ValueError(f"{a_csv} and {b_csv} share no episode ids")
    diffs = [b[i] - a[i] for i in shared]
    mean, ci95 = aggregate(diffs)
    return {
        "episodes": len(shared),
        "mean_a": math.fsum(a[i] for i in shared) / len(shared),
        "mean_b": math.fsum(b[i] for i in shared) / len(shared),
        "mean_diff": mean,
        "ci95": ci95,
        "b_wins": sum(1 for d in diffs if d > 0) / len(diffs),
        "ties": sum(1 for d in diffs if d == 0) / len(diffs),
    }

