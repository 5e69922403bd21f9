"""Comparison samplers: random, MC-dropout uncertainty and cluster diversity.

Every sampler returns exactly ``B`` distinct spot ids, sorted ascending.
"""

import math

import numpy as np
import numpy.typing as npt
import structlog
from sklearn.cluster import DBSCAN
from sklearn.neighbors import NearestNeighbors

from .config import BaselineConfig, TrainConfig
from .dataset import Dataset
from .errors import BudgetError, StateError
from .layers import Mlp
from .numerics import FloatArray, minibatch_kmeans, pca_fit
from .predictor import PredictorModel, train

logger = structlog.get_logger(__name__)


def _check_budget(budget: int, n: int) -> None:
    if budget < 1 or budget > n:
        raise BudgetError(f"budget {budget} outside [1, {n}]")


def random_sampler(spot_ids: npt.ArrayLike, budget: int, seed: int = 42) -> list[int]:
    """Uniform sample without replacement."""
    ids = np.asarray(spot_ids, dtype=np.int64)
    _check_budget(budget, ids.size)
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(ids, size=budget, replace=False))


def output_variance(net: Mlp, x: npt.ArrayLike, input_scales: npt.ArrayLike) -> float:
    """Mean over outputs of the across-pass variance, one pass per scale row.

    Passes are centered on the first one, so identical passes give exactly 0.
    """
    scales = np.asarray(input_scales, dtype=np.float64)
    row = np.asarray(x, dtype=np.float64).reshape(1, -1)
    outputs, _ = net.forward(np.repeat(row, scales.shape[0], axis=0), scales)
    return float((outputs - outputs[0]).var(axis=0).mean())


def mc_dropout_scores(
    net: Mlp,
    features: npt.ArrayLike,
    spot_ids: npt.ArrayLike,
    dropout_rate: float,
    passes: int,
    seed: int,
) -> FloatArray:
    """Uncertainty per candidate from ``passes`` dropout-perturbed forward passes.

    Each candidate draws its masks from its own stream seeded by
    ``(seed, spot_id)``, so scores do not depend on candidate order.
    """
    feats = np.asarray(features, dtype=np.float64)
    ids = np.asarray(spot_ids, dtype=np.int64)
    keep = 1.0 - dropout_rate
    scores = np.empty(ids.size, dtype=np.float64)
    for i, sid in enumerate(ids):
        rng = np.random.default_rng([seed, int(sid)])
        masks = (rng.random((passes, feats.shape[1])) >= dropout_rate) / keep
        scores[i] = output_variance(net, feats[i], masks)
    return scores


def uncertainty_sampler(
    model: PredictorModel,
    features: npt.ArrayLike,
    spot_ids: npt.ArrayLike,
    budget: int,
    cfg: BaselineConfig,
) -> list[int]:
    """Top-``budget`` candidates by MC-dropout variance; ties go to the lowest id.

    Raises:
        StateError: the predictor has not been trained.
        BudgetError: the budget exceeds the candidate count.
    """
    if not model.trained:
        raise StateError("uncertainty sampling needs a trained predictor")
    ids = np.asarray(spot_ids, dtype=np.int64)
    _check_budget(budget, ids.size)
    scores = mc_dropout_scores(
        model.regressor, features, ids, cfg.dropout_rate, cfg.passes, cfg.seed
    )
    order = np.lexsort((ids, -scores))[:budget]
    return sorted(int(i) for i in ids[order])


def uncertainty_pool(
    ds: Dataset, budget: int, cfg: BaselineConfig, train_cfg: TrainConfig
) -> list[int]:
    """Random warm start, a predictor trained on it, then the most uncertain rest.

    The warm start is ``warm_start_ratio`` of the spots (at least one, at most
    the budget) and is part of the returned pool.
    """
    _check_budget(budget, len(ds))
    warm_count = min(budget, max(1, math.ceil(cfg.warm_start_ratio * len(ds))))
    warm = random_sampler(ds.spot_ids, warm_count, seed=cfg.seed)
    if warm_count == budget:
        return warm
    model = train(ds, warm, train_cfg)
    rest = np.setdiff1d(ds.spot_ids, np.asarray(warm, dtype=np.int64))
    rows = ds.index_of(rest)
    picked = uncertainty_sampler(model, ds.features[rows], rest, budget - warm_count, cfg)
    logger.info("Uncertainty pool", warm_start=warm_count, queried=len(picked))
    return sorted(warm + picked)


def min_cluster_count(n: int) -> int:
    """Lower bound on the diversity sampler's cluster count, ``ceil(sqrt(n)/5)``."""
    return max(1, math.ceil(math.sqrt(n) / 5.0))


def _standardize(x: FloatArray) -> FloatArray:
    std = x.std(axis=0)
    return (x - x.mean(axis=0)) / np.where(std > 0, std, 1.0)


def diversity_groups(
    features: npt.ArrayLike, cfg: BaselineConfig, seed: int = 42
) -> list[npt.NDArray[np.int64]]:
    """Cluster the standardized, PCA-reduced features into row groups.

    Density-based clustering first; when it finds fewer than
    :func:`min_cluster_count` clusters, k-means with that many clusters is
    used instead. Density noise, if any, forms one extra group at the end.
    """
    x = _standardize(np.asarray(features, dtype=np.float64))
    n, d = x.shape
    if n >= 2:
        x = pca_fit(x, min(cfg.pca_dim, d, n), seed=seed).transform(x)

    floor = min_cluster_count(n)
    neighbors = min(cfg.neighbors, n - 1)
    if neighbors >= 1:
        nn = NearestNeighbors(n_neighbors=neighbors + 1).fit(x)
        dist, _ = nn.kneighbors(x)
        eps = max(float(np.median(dist[:, neighbors])), 1e-12)
        labels = DBSCAN(eps=eps, min_samples=cfg.min_points).fit_predict(x)
    else:
        eps = 0.0
        labels = np.zeros(n, dtype=np.int64)
    found = int(np.unique(labels[labels >= 0]).size)
    fallback = found < floor
    logger.info(
        "Diversity clustering",
        eps=eps,
        min_points=cfg.min_points,
        clusters=found,
        noise=int((labels < 0).sum()),
        min_clusters=floor,
        kmeans_fallback=fallback,
    )
    if fallback:
        distinct = np.unique(x, axis=0).shape[0]
        _, labels = minibatch_kmeans(
            x, min(floor, distinct), batch=n, iters=100, seed=seed
        )
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels[labels >= 0])]
    noise = np.flatnonzero(labels < 0)
    if noise.size:
        groups.append(noise)
    return groups


def diversity_sampler(
    features: npt.ArrayLike,
    spot_ids: npt.ArrayLike,
    budget: int,
    cfg: BaselineConfig,
    seed: int = 42,
) -> list[int]:
    """Round-robin draw across feature clusters, shuffled within each cluster."""
    ids = np.asarray(spot_ids, dtype=np.int64)
    _check_budget(budget, ids.size)
    rng = np.random.default_rng(seed)
    queues = [list(rng.permutation(group)) for group in diversity_groups(features, cfg, seed)]
    picked: list[int] = []
    while len(picked) < budget:
        for queue in queues:
            if queue and len(picked) < budget:
                picked.append(int(queue.pop(0)))
    return sorted(int(i) for i in ids[picked])
