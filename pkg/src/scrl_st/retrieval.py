"""Memory-bank retrieval that produces soft expression targets.

A query image embedding is matched by cosine similarity against the
projected expressions of the training pool. The top-K neighbours are
narrowed to the most frequent cell types and their mean expression becomes
the soft label.
"""

from collections import Counter
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import structlog

from .config import TrainConfig
from .errors import StateError
from .numerics import FloatArray, IntArray, cosine_matrix

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class MemoryBank:
    """Projected expression embeddings, raw expressions and cell types of the pool."""

    spot_ids: IntArray
    embeddings: FloatArray
    expressions: FloatArray
    cell_types: IntArray

    def __len__(self) -> int:
        return int(self.spot_ids.shape[0])


def effective_k(k: int, bank_size: int, leave_one_out: bool) -> int:
    """K after clipping to the number of retrievable entries."""
    return max(0, min(k, bank_size - (1 if leave_one_out else 0)))


def retrieve(
    query: npt.ArrayLike,
    bank: MemoryBank,
    k: int,
    exclude_id: int | None = None,
    warn: bool = True,
) -> tuple[IntArray, FloatArray]:
    """Top-``k`` bank rows by cosine similarity (descending, lowest index on ties).

    The bank entry whose spot id equals ``exclude_id`` is never returned.
    A ``k`` larger than the retrievable entries is clipped with a warning.
    """
    if len(bank) == 0:
        raise StateError("memory bank is empty")
    sims = cosine_matrix(np.asarray(query, dtype=np.float64).reshape(1, -1), bank.embeddings)[0]
    candidates = np.arange(len(bank))
    if exclude_id is not None:
        candidates = candidates[bank.spot_ids != exclude_id]
    k_eff = min(k, candidates.size)
    if k_eff < k and warn:
        logger.warning("Retrieval K clipped", requested=k, used=k_eff, bank=len(bank))
    order = candidates[np.argsort(-sims[candidates], kind="stable")[:k_eff]]
    return order.astype(np.int64), sims[order]


def majority_type_filter(indices: npt.ArrayLike, bank: MemoryBank, t: int) -> IntArray:
    """Keep entries whose cell type is among the ``t`` most frequent in ``indices``.

    Frequency ties are broken toward the lower type id; input order is kept.
    """
    idx = np.asarray(indices, dtype=np.int64)
    types = bank.cell_types[idx]
    counts = Counter(int(c) for c in types)
    ranked = sorted(counts, key=lambda c: (-counts[c], c))[:t]
    return idx[np.isin(types, ranked)]


def soft_label(indices: npt.ArrayLike, bank: MemoryBank) -> FloatArray:
    """Mean raw expression over the filtered neighbours."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise StateError("soft label of an empty neighbour set")
    return bank.expressions[idx].mean(axis=0)


def retrieval_targets(
    queries: npt.ArrayLike,
    query_ids: npt.ArrayLike,
    bank: MemoryBank,
    cfg: TrainConfig,
) -> tuple[FloatArray, FloatArray]:
    """Soft labels and mean filtered similarities for a batch of queries.

    Queries are excluded from their own retrieval. Rows with nothing to
    retrieve get a zero target and similarity 0, which gates their
    distillation weight to 0.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    ids = np.asarray(query_ids, dtype=np.int64)
    targets = np.zeros((q.shape[0], bank.expressions.shape[1]), dtype=np.float64)
    mean_sims = np.zeros(q.shape[0], dtype=np.float64)
    sims_all = cosine_matrix(q, bank.embeddings)
    positions = np.arange(len(bank))
    for row in range(q.shape[0]):
        keep = positions[bank.spot_ids != ids[row]]
        k_eff = min(cfg.top_k, keep.size)
        if k_eff == 0:
            continue
        sims = sims_all[row]
        top = keep[np.argsort(-sims[keep], kind="stable")[:k_eff]]
        chosen = majority_type_filter(top, bank, cfg.top_t) if cfg.cell_type_filter else top
        targets[row] = soft_label(chosen, bank)
        mean_sims[row] = float(sims[chosen].mean())
    return targets, mean_sims
