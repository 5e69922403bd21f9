"""Synthetic dataset generator with planted cell types and spatial patches.

Each cell type owns an expression prototype and an image-feature prototype.
On every slide each type is placed in a few Gaussian patches; a spot takes
the type whose patch dominates at its location, then draws expression,
features and an expression embedding around its type's prototypes. The
single-cell reference is drawn from the same prototypes, so the reward's
type matching and the predictor both have real structure to find.
"""

from pathlib import Path

import numpy as np
import pandas as pd
import structlog
from pydantic import ValidationError

from .config import SynthConfig
from .dataset import normalize_slide_coordinates, write_dataset
from .errors import ConfigError
from .numerics import FloatArray, IntArray

logger = structlog.get_logger(__name__)

_PATCH_SCALE = (0.08, 0.2)


def _slide_sizes(n_spots: int, n_slides: int) -> list[int]:
    base, extra = divmod(n_spots, n_slides)
    return [base + (1 if s < extra else 0) for s in range(n_slides)]


def _patch_types(
    coords: FloatArray, cfg: SynthConfig, rng: np.random.Generator
) -> IntArray:
    """Type of the strongest patch at each coordinate."""
    strength = np.zeros((coords.shape[0], cfg.n_types), dtype=np.float64)
    for t in range(cfg.n_types):
        for _ in range(int(rng.integers(cfg.min_patches, cfg.max_patches + 1))):
            center = rng.uniform(0.0, 1.0, size=2)
            scale = rng.uniform(*_PATCH_SCALE)
            dist2 = ((coords - center) ** 2).sum(axis=1)
            strength[:, t] = np.maximum(strength[:, t], np.exp(-dist2 / (2 * scale**2)))
    return np.argmax(strength, axis=1).astype(np.int64)


def generate(cfg: SynthConfig, out_dir: str | Path) -> Path:
    """Write a synthetic dataset directory; the same config gives identical bytes.

    Raises:
        ConfigError: the configuration violates a size rule.
    """
    try:
        cfg = SynthConfig.model_validate(cfg.model_dump())
    except ValidationError as e:
        raise ConfigError(str(e)) from e

    rng = np.random.default_rng(cfg.seed)
    k, g, d, dz = cfg.n_types, cfg.n_genes, cfg.feature_dim, cfg.embedding_dim
    expr_proto = rng.gamma(shape=2.0, scale=1.0, size=(k, g))
    feat_proto = rng.normal(0.0, 1.0, size=(k, d))
    mapping = rng.normal(0.0, 1.0 / np.sqrt(g), size=(g, dz))

    slide_ids = np.concatenate(
        [np.full(size, s, dtype=np.int64) for s, size in enumerate(_slide_sizes(cfg.n_spots, cfg.n_slides))]
    )
    raw = rng.uniform(0.0, 1.0, size=(cfg.n_spots, 2))
    coords = normalize_slide_coordinates(raw, slide_ids)
    types = np.empty(cfg.n_spots, dtype=np.int64)
    for s in range(cfg.n_slides):
        mask = slide_ids == s
        types[mask] = _patch_types(coords[mask], cfg, rng)

    noise = cfg.noise
    expressions = np.clip(expr_proto[types] + noise * rng.normal(size=(cfg.n_spots, g)), 0.0, None)
    features = feat_proto[types] + noise * rng.normal(size=(cfg.n_spots, d))
    expr_embeddings = expressions @ mapping + noise * rng.normal(size=(cfg.n_spots, dz))

    # The first k reference cells cover every type in order, so labels
    # numbered by first appearance equal the planted type ids.
    ref_types = np.concatenate(
        [np.arange(k), rng.integers(0, k, size=cfg.n_reference_cells - k)]
    ).astype(np.int64)
    ref_expr = np.clip(
        expr_proto[ref_types] + noise * rng.normal(size=(cfg.n_reference_cells, g)), 0.0, None
    )
    ref_embeddings = ref_expr @ mapping + noise * rng.normal(size=(cfg.n_reference_cells, dz))

    spots = pd.DataFrame(
        {
            "spot_id": np.arange(cfg.n_spots, dtype=np.int64),
            "slide_id": slide_ids,
            "x": coords[:, 0],
            "y": coords[:, 1],
        }
    )
    root = write_dataset(
        out_dir,
        spots=spots,
        features=features,
        expressions=expressions,
        reference_embeddings=ref_embeddings,
        reference_type_names=[f"type_{t:02d}" for t in ref_types],
        expr_embeddings=expr_embeddings if cfg.include_expr_embeddings else None,
        planted_types=types,
    )
    logger.info(
        "Synthetic dataset written",
        path=str(root),
        spots=cfg.n_spots,
        slides=cfg.n_slides,
        genes=g,
        types=k,
        reference_cells=cfg.n_reference_cells,
        planted_types_present=int(np.unique(types).size),
    )
    return root
