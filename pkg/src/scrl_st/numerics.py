"""Deterministic numerical primitives shared by the reward, sampler and predictor.

Everything here is pure: results depend only on the arguments (and the seed
where one is taken). Distance aggregates are computed exactly in row chunks
rather than through an approximate index.
"""

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import structlog

from .errors import DimensionError

logger = structlog.get_logger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]

ZERO_NORM = 1e-12
_CHUNK = 1024


def softmax(scores: npt.ArrayLike) -> FloatArray:
    """Max-subtracted softmax of a score vector."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise DimensionError(f"softmax needs a non-empty vector, got shape {s.shape}")
    e = np.exp(s - s.max())
    return e / e.sum()


def log_softmax(scores: npt.ArrayLike) -> FloatArray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise DimensionError(f"softmax needs a non-empty vector, got shape {s.shape}")
    shifted = s - s.max()
    return shifted - np.log(np.exp(shifted).sum())


def cosine(a: npt.ArrayLike, b: npt.ArrayLike) -> float:
    """Cosine similarity; 0 when either vector has (near-)zero norm."""
    u = np.asarray(a, dtype=np.float64)
    v = np.asarray(b, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionError(f"cosine of vectors with shapes {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < ZERO_NORM or nv < ZERO_NORM:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def unit_rows(x: npt.ArrayLike) -> FloatArray:
    """Rows scaled to unit norm; rows with norm below ZERO_NORM become zero."""
    m = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    safe = np.where(norms < ZERO_NORM, 1.0, norms)
    return np.where(norms < ZERO_NORM, 0.0, m / safe)


def cosine_matrix(a: npt.ArrayLike, b: npt.ArrayLike) -> FloatArray:
    """All-pairs cosine similarity between the rows of ``a`` and ``b``."""
    ua = unit_rows(np.atleast_2d(a))
    ub = unit_rows(np.atleast_2d(b))
    if ua.shape[1] != ub.shape[1]:
        raise DimensionError(
            f"cosine between widths {ua.shape[1]} and {ub.shape[1]}"
        )
    return np.clip(ua @ ub.T, -1.0, 1.0)


def squared_distances(x: npt.ArrayLike, centers: npt.ArrayLike) -> FloatArray:
    """Exact squared Euclidean distances, rows of ``x`` against ``centers``."""
    xs = np.asarray(x, dtype=np.float64)
    cs = np.asarray(centers, dtype=np.float64)
    if xs.ndim != 2 or cs.ndim != 2 or xs.shape[1] != cs.shape[1]:
        raise DimensionError(
            f"distance between shapes {xs.shape} and {cs.shape}"
        )
    out = np.empty((xs.shape[0], cs.shape[0]), dtype=np.float64)
    for start in range(0, xs.shape[0], _CHUNK):
        block = xs[start : start + _CHUNK]
        out[start : start + _CHUNK] = ((block[:, None, :] - cs[None, :, :]) ** 2).sum(
            axis=2
        )
    return out


def nearest(x: npt.ArrayLike, centers: npt.ArrayLike) -> IntArray:
    """Index of the nearest center per row; ties go to the lowest index."""
    return np.argmin(squared_distances(x, centers), axis=1).astype(np.int64)


@dataclass(frozen=True)
class PcaModel:
    """Principal directions of a centered matrix (columns of ``basis``)."""

    mean: FloatArray
    basis: FloatArray
    explained_variance: FloatArray

    @property
    def r(self) -> int:
        return int(self.basis.shape[1])

    def transform(self, x: npt.ArrayLike) -> FloatArray:
        xs = np.asarray(x, dtype=np.float64)
        if xs.shape[-1] != self.mean.shape[0]:
            raise DimensionError(
                f"PCA fit on width {self.mean.shape[0]}, got width {xs.shape[-1]}"
            )
        return (xs - self.mean) @ self.basis

    def inverse_transform(self, z: npt.ArrayLike) -> FloatArray:
        return np.asarray(z, dtype=np.float64) @ self.basis.T + self.mean


def pca_fit(x: npt.ArrayLike, r: int, seed: int = 42) -> PcaModel:
    """PCA by eigendecomposition of the sample covariance.

    Columns are ordered by descending explained variance and signed so that
    each column's largest-magnitude entry is positive. The decomposition is
    deterministic; ``seed`` is accepted so every fitted component of the
    pipeline shares one calling convention.
    """
    del seed
    xs = np.asarray(x, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[0] < 2:
        raise DimensionError(f"PCA needs at least 2 rows, got shape {xs.shape}")
    n, d = xs.shape
    if not 1 <= r <= min(n, d):
        raise DimensionError(f"PCA width {r} outside [1, {min(n, d)}]")

    mean = xs.mean(axis=0)
    centered = xs - mean
    cov = centered.T @ centered / (n - 1)
    values, vectors = np.linalg.eigh(cov)
    order = np.argsort(values, kind="stable")[::-1][:r]
    basis = vectors[:, order]
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(r)])
    basis = basis * np.where(signs == 0, 1.0, signs)
    return PcaModel(
        mean=mean, basis=basis, explained_variance=np.maximum(values[order], 0.0)
    )


@dataclass(frozen=True)
class KmeansModel:
    """Cluster centers; ``assign`` is nearest-center with lowest-index ties."""

    centers: FloatArray

    @property
    def n_clusters(self) -> int:
        return int(self.centers.shape[0])

    def assign(self, x: npt.ArrayLike) -> IntArray:
        return nearest(x, self.centers)


def _kmeans_plus_plus(
    xs: FloatArray, n_clusters: int, rng: np.random.Generator
) -> FloatArray:
    n = xs.shape[0]
    chosen = [int(rng.integers(n))]
    closest = squared_distances(xs, xs[chosen]).ravel()
    for _ in range(1, n_clusters):
        total = closest.sum()
        # Points already chosen have weight 0, so distinct input guarantees
        # distinct centers.
        pick = int(rng.choice(n, p=closest / total))
        chosen.append(pick)
        closest = np.minimum(closest, squared_distances(xs, xs[pick : pick + 1]).ravel())
    return xs[chosen].copy()


def minibatch_kmeans(
    x: npt.ArrayLike,
    n_clusters: int,
    batch: int = 1024,
    iters: int = 100,
    seed: int = 42,
) -> tuple[KmeansModel, IntArray]:
    """Mini-batch k-means with k-means++ seeding.

    Each iteration draws a batch without replacement, assigns it to the
    nearest centers and moves every touched center toward the batch mean with
    per-center learning rate 1/(visit count). One full-batch pass then moves
    every non-empty center to the mean of its points, and a cluster left empty
    is re-seeded from the point farthest from its center.

    Returns:
        The model and the final nearest-center assignment of every row.
    """
    xs = np.asarray(x, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise DimensionError(f"k-means needs a non-empty matrix, got shape {xs.shape}")
    n = xs.shape[0]
    if not 1 <= n_clusters <= n:
        raise DimensionError(f"cluster count {n_clusters} outside [1, {n}]")
    distinct = np.unique(xs, axis=0).shape[0]
    if n_clusters > distinct:
        raise DimensionError(
            f"cluster count {n_clusters} exceeds the {distinct} distinct points"
        )

    rng = np.random.default_rng(seed)
    centers = _kmeans_plus_plus(xs, n_clusters, rng)
    visits = np.zeros(n_clusters, dtype=np.float64)

    for _ in range(iters):
        idx = np.arange(n) if batch >= n else rng.choice(n, size=batch, replace=False)
        block = xs[idx]
        labels = nearest(block, centers)
        counts = np.bincount(labels, minlength=n_clusters).astype(np.float64)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, block)
        touched = counts > 0
        visits[touched] += counts[touched]
        centers[touched] += (
            sums[touched] - counts[touched, None] * centers[touched]
        ) / visits[touched, None]

    labels = nearest(xs, centers)
    counts = np.bincount(labels, minlength=n_clusters)
    sums = np.zeros_like(centers)
    np.add.at(sums, labels, xs)
    filled = counts > 0
    centers[filled] = sums[filled] / counts[filled, None]
    labels = nearest(xs, centers)
    for _ in range(n_clusters):
        counts = np.bincount(labels, minlength=n_clusters)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        gaps = squared_distances(xs, centers)[np.arange(n), labels]
        far = int(np.argmax(gaps))
        if gaps[far] == 0.0:
            break
        centers[int(empty[0])] = xs[far]
        logger.debug("Re-seeded empty cluster", cluster=int(empty[0]), point=far)
        labels = nearest(xs, centers)

    return KmeansModel(centers=centers), labels


def normalized_entropy(counts: npt.ArrayLike, eps: float = 1e-8) -> float:
    """Entropy of the observed (nonzero) categories over log of their number.

    A single observed category gives 0.
    """
    c = np.asarray(counts, dtype=np.float64).ravel()
    if c.size == 0 or (c < 0).any() or c.sum() <= 0:
        raise ValueError("normalized entropy needs nonnegative counts with a positive total")
    observed = c[c > 0]
    k = observed.size
    if k == 1:
        return 0.0
    p = observed / observed.sum()
    return float(-(p * np.log(p + eps)).sum() / np.log(k + eps))


def _as_points(points: npt.ArrayLike) -> FloatArray:
    p = np.asarray(points, dtype=np.float64)
    if p.size == 0:
        return p.reshape(0, 2)
    if p.ndim != 2:
        raise DimensionError(f"points must be an n x 2 array, got shape {p.shape}")
    return p


def mean_pairwise_distance(points: npt.ArrayLike, exclude_self: bool = False) -> float:
    """Mean Euclidean distance over ordered pairs.

    Self-pairs count in the denominator (|P|^2) unless ``exclude_self``.
    """
    p = _as_points(points)
    n = p.shape[0]
    if n == 0:
        raise ValueError("mean pairwise distance of an empty point set")
    total = 0.0
    for start in range(0, n, _CHUNK):
        total += float(np.sqrt(squared_distances(p[start : start + _CHUNK], p)).sum())
    if exclude_self:
        return 0.0 if n == 1 else total / (n * (n - 1))
    return total / (n * n)


def mean_coverage_distance(all_points: npt.ArrayLike, sampled: npt.ArrayLike) -> float:
    """Mean over all points of the distance to the nearest sampled point."""
    a = _as_points(all_points)
    s = _as_points(sampled)
    if s.shape[0] == 0:
        raise ValueError("coverage distance needs a non-empty sample")
    if a.shape[0] == 0:
        return 0.0
    mins = np.empty(a.shape[0], dtype=np.float64)
    for start in range(0, a.shape[0], _CHUNK):
        block = squared_distances(a[start : start + _CHUNK], s)
        mins[start : start + _CHUNK] = np.sqrt(block.min(axis=1))
    return float(mins.mean())
