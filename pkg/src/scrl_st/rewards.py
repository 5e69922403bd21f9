"""Single-cell guided reward for the active sampler.

Three components are combined linearly: how many single-cell clusters the
pool reaches, how evenly the pool's matched cell types are distributed, and
how the pool is spread over the slide.
"""

import math

import numpy as np
import numpy.typing as npt
import structlog
from pydantic import BaseModel, ConfigDict, Field

from .config import RewardConfig
from .dataset import Dataset, ExpressionBatch, SingleCellReference
from .errors import DimensionError
from .numerics import (
    FloatArray,
    IntArray,
    KmeansModel,
    PcaModel,
    cosine_matrix,
    mean_coverage_distance,
    mean_pairwise_distance,
    minibatch_kmeans,
    normalized_entropy,
    pca_fit,
)

logger = structlog.get_logger(__name__)

SQRT2 = math.sqrt(2.0)
_TYPE_CHUNK = 512


class RewardWeights(BaseModel):
    """Linear weights of the three reward components."""

    model_config = ConfigDict(frozen=True)

    w_sc: float = Field(default=20.0, ge=0.0)
    w_type: float = Field(default=5.0, ge=0.0)
    w_spa: float = Field(default=0.05, ge=0.0)

    @classmethod
    def from_config(cls, cfg: RewardConfig) -> "RewardWeights":
        w_sc, w_type, w_spa = cfg.weights()
        return cls(w_sc=w_sc, w_type=w_type, w_spa=w_spa)


class RewardBreakdown(BaseModel):
    """Reward components and their weighted sum."""

    model_config = ConfigDict(frozen=True)

    r_sc: float
    r_type: float
    r_spa: float
    combined: float


def cluster_coverage_reward(z: npt.ArrayLike, km: KmeansModel) -> float:
    """Fraction of clusters that receive at least one row of ``z``."""
    zs = np.asarray(z, dtype=np.float64)
    if zs.ndim != 2 or zs.shape[0] == 0:
        raise ValueError("cluster coverage needs at least one row")
    if zs.shape[1] != km.centers.shape[1]:
        raise DimensionError(
            f"rows have width {zs.shape[1]}, centers have width {km.centers.shape[1]}"
        )
    return np.unique(km.assign(zs)).size / km.n_clusters


def assign_cell_types(z: npt.ArrayLike, ref: SingleCellReference) -> IntArray:
    """Type of the most cosine-similar reference cell per row (lowest index on ties)."""
    zs = np.atleast_2d(np.asarray(z, dtype=np.float64))
    q = np.asarray(ref.embeddings, dtype=np.float64)
    if q.shape[0] == 0:
        raise ValueError("single-cell reference is empty")
    if zs.shape[1] != q.shape[1]:
        raise DimensionError(
            f"embedding width {zs.shape[1]} differs from reference width {q.shape[1]}"
        )
    types = np.asarray(ref.cell_types, dtype=np.int64)
    best = np.empty(zs.shape[0], dtype=np.int64)
    for start in range(0, zs.shape[0], _TYPE_CHUNK):
        sims = cosine_matrix(zs[start : start + _TYPE_CHUNK], q)
        best[start : start + _TYPE_CHUNK] = np.argmax(sims, axis=1)
    return types[best]


def type_diversity_reward(labels: npt.ArrayLike, eps: float = 1e-8) -> float:
    """Normalized entropy of the label frequencies."""
    lab = np.asarray(labels).ravel()
    if lab.size == 0:
        raise ValueError("type diversity of an empty label vector")
    _, counts = np.unique(lab, return_counts=True)
    return normalized_entropy(counts, eps)


def spatial_reward(
    all_coords: npt.ArrayLike,
    sampled_coords: npt.ArrayLike,
    mode: str = "verbatim",
    exclude_self: bool = False,
) -> float:
    """Average of pool dispersion and a coverage term.

    ``verbatim`` adds the mean coverage distance as is; ``corrected`` adds
    ``sqrt(2) - D_cover`` so better coverage scores higher.
    """
    d_disp = mean_pairwise_distance(sampled_coords, exclude_self=exclude_self)
    d_cover = mean_coverage_distance(all_coords, sampled_coords)
    if mode == "verbatim":
        return (d_disp + d_cover) / 2.0
    if mode == "corrected":
        return (d_disp + (SQRT2 - d_cover)) / 2.0
    raise ValueError(f"unknown spatial reward mode {mode!r}")


def combined_reward(
    r_sc: float, r_type: float, r_spa: float, weights: RewardWeights
) -> RewardBreakdown:
    return RewardBreakdown(
        r_sc=r_sc,
        r_type=r_type,
        r_spa=r_spa,
        combined=weights.w_sc * r_sc + weights.w_type * r_type + weights.w_spa * r_spa,
    )


def fit_width(m: npt.ArrayLike, width: int) -> FloatArray:
    """Zero-pad or truncate columns to ``width``."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.shape[1] >= width:
        return arr[:, :width].copy()
    return np.pad(arr, ((0, 0), (0, width - arr.shape[1])))


class RewardModel:
    """Reference-derived state (PCA basis, clusters) plus the slide layout.

    Built once per sampling run; :meth:`score` is then a pure function of the
    selected spots.
    """

    def __init__(
        self,
        reference: SingleCellReference,
        all_coords: npt.ArrayLike,
        cfg: RewardConfig | None = None,
        weights: RewardWeights | None = None,
        use_fallback: bool = False,
    ) -> None:
        self.cfg = cfg or RewardConfig()
        self.weights = weights or RewardWeights.from_config(self.cfg)
        self.reference = reference
        self.all_coords = np.asarray(all_coords, dtype=np.float64)
        self.use_fallback = use_fallback

        q = np.asarray(reference.embeddings, dtype=np.float64)
        m, d_z = q.shape
        width = min(self.cfg.pca_dim, d_z, m)
        self.pca: PcaModel = pca_fit(q, width, seed=self.cfg.seed)
        projected = self.pca.transform(q)
        distinct = np.unique(projected, axis=0).shape[0]
        n_clusters = min(self.cfg.n_clusters, m, distinct)
        self.kmeans, _ = minibatch_kmeans(
            projected,
            n_clusters,
            batch=self.cfg.kmeans_batch,
            iters=self.cfg.kmeans_iters,
            seed=self.cfg.seed,
        )
        log = logger.warning if use_fallback else logger.info
        log(
            "Reward context built",
            pca_dim=width,
            clusters=n_clusters,
            expression_fallback=use_fallback,
            weights=self.weights.model_dump(),
            spatial_mode=self.cfg.spatial_mode,
        )

    @classmethod
    def from_dataset(
        cls,
        ds: Dataset,
        cfg: RewardConfig | None = None,
        weights: RewardWeights | None = None,
    ) -> "RewardModel":
        return cls(
            ds.reference,
            ds.coords(),
            cfg=cfg,
            weights=weights,
            use_fallback=ds.expr_embeddings is None,
        )

    @property
    def embedding_dim(self) -> int:
        return int(self.pca.mean.shape[0])

    def embed(self, batch: ExpressionBatch) -> FloatArray:
        """Expression embeddings of a revealed batch.

        Without stored embeddings the expression rows are padded or truncated
        to the reference width instead.
        """
        if batch.expr_embeddings is not None and not self.use_fallback:
            return np.asarray(batch.expr_embeddings, dtype=np.float64)
        return fit_width(batch.expressions, self.embedding_dim)

    def score(self, z: npt.ArrayLike, coords: npt.ArrayLike) -> RewardBreakdown:
        """Reward of a selection given its embeddings and coordinates."""
        zs = np.asarray(z, dtype=np.float64)
        r_sc = cluster_coverage_reward(self.pca.transform(zs), self.kmeans)
        r_type = type_diversity_reward(assign_cell_types(zs, self.reference), self.cfg.eps)
        r_spa = spatial_reward(
            self.all_coords,
            coords,
            mode=self.cfg.spatial_mode,
            exclude_self=self.cfg.disp_exclude_self,
        )
        return combined_reward(r_sc, r_type, r_spa, self.weights)

    def score_ids(self, ds: Dataset, spot_ids: npt.ArrayLike) -> RewardBreakdown:
        """Reward of a finished pool, read without touching the revealed set."""
        ids = [int(i) for i in np.asarray(spot_ids).ravel()]
        rows = ds.index_of(ids)
        batch = ExpressionBatch(
            spot_ids=ids,
            expressions=ds.expressions[rows],
            expr_embeddings=None if ds.expr_embeddings is None else ds.expr_embeddings[rows],
        )
        return self.score(self.embed(batch), ds.coords()[rows])
