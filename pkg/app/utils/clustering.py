# app/utils/clustering.py
import warnings
from typing import Sequence

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import v_measure_score

from app.errors import LabError
from app.utils.rng import RngStream

KMEANS_RESTARTS = 10
KMEANS_MAX_ITER = 100
KMEANS_TOL = 1e-6


class ClusteringError(LabError, ValueError):
    pass


def kmeans(features: np.ndarray, k: int, rng: RngStream) -> np.ndarray:
    """
    k-means++ seeding, Lloyd iterations, 10 restarts; returns the assignment
    with the lowest inertia. Empty clusters are repaired by moving the
    farthest point into them.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ClusteringError(f"features must be 2-D, got shape {features.shape}")
    if not 1 <= k <= len(features):
        raise ClusteringError(f"K must lie in [1, {len(features)}], got {k}")
    model = KMeans(
        n_clusters=k,
        init="k-means++",
        n_init=KMEANS_RESTARTS,
        max_iter=KMEANS_MAX_ITER,
        tol=KMEANS_TOL,
        algorithm="lloyd",
        random_state=rng.seed_int(),
    )
    with warnings.catch_warnings():
        # fewer distinct points than K (duplicates, collapsed features)
        warnings.simplefilter("ignore", ConvergenceWarning)
        return model.fit_predict(features).astype(np.int64)


def v_measure(truth: Sequence[int], clusters: Sequence[int]) -> float:
    """Harmonic mean of homogeneity and completeness, natural-log entropies."""
    truth = np.asarray(truth)
    clusters = np.asarray(clusters)
    if len(truth) != len(clusters):
        raise ClusteringError(f"{len(truth)} labels vs {len(clusters)} cluster ids")
    if len(truth) == 0:
        raise ClusteringError("v_measure needs at least one point")
    return float(v_measure_score(truth, clusters))
