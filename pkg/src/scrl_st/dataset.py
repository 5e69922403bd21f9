"""Dataset schema, directory I/O and the simulated sequencer.

A dataset directory holds::

    spots.csv                   spot_id,slide_id,x,y (row order = matrix row order)
    features.scrm               N x d image features
    expressions.scrm            N x G expression (hidden until revealed)
    expr_embeddings.scrm        N x d_z expression embeddings (optional)
    reference_embeddings.scrm   M x d_z single-cell reference
    reference_types.csv         cell_id,type_name
    planted_types.csv           spot_id,type_id (optional, synthetic data only)
"""

import io
import threading
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
import pandas as pd
import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import SchemaError
from .helpers import atomic_write_bytes
from .matrix_io import Matrix, load_matrix, save_matrix

logger = structlog.get_logger(__name__)

SPOTS_FILE = "spots.csv"
FEATURES_FILE = "features.scrm"
EXPRESSIONS_FILE = "expressions.scrm"
EXPR_EMBEDDINGS_FILE = "expr_embeddings.scrm"
REFERENCE_EMBEDDINGS_FILE = "reference_embeddings.scrm"
REFERENCE_TYPES_FILE = "reference_types.csv"
PLANTED_TYPES_FILE = "planted_types.csv"

SPOT_COLUMNS = ["spot_id", "slide_id", "x", "y"]
REFERENCE_COLUMNS = ["cell_id", "type_name"]
PLANTED_COLUMNS = ["spot_id", "type_id"]


class SpotRecord(BaseModel):
    """One candidate sequencing location."""

    model_config = ConfigDict(frozen=True)

    spot_id: int
    slide_id: int
    x: float = Field(..., ge=0.0, le=1.0)
    y: float = Field(..., ge=0.0, le=1.0)
    row: int = Field(..., ge=0, description="Row index into every spot matrix")


class SingleCellReference(BaseModel):
    """External single-cell prior: embeddings plus per-cell type labels."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    embeddings: Any = Field(..., description="M x d_z float matrix")
    cell_types: Any = Field(..., description="M integer labels")
    label_names: list[str]

    @model_validator(mode="after")
    def check_labels(self) -> "SingleCellReference":
        """One label per cell, each naming an entry of ``label_names``."""
        emb = np.asarray(self.embeddings)
        labels = np.asarray(self.cell_types)
        if emb.ndim != 2:
            raise SchemaError(f"reference embeddings must be 2-D, got {emb.shape}")
        if labels.shape != (emb.shape[0],):
            raise SchemaError(
                f"{labels.size} reference labels for {emb.shape[0]} reference cells"
            )
        if labels.size and (
            labels.min() < 0 or labels.max() >= len(self.label_names)
        ):
            raise SchemaError("reference label outside [0, number of label names)")
        return self

    @property
    def n_cells(self) -> int:
        return int(np.asarray(self.embeddings).shape[0])


class ExpressionBatch(BaseModel):
    """Expression rows returned by :meth:`Dataset.reveal`, in dataset row order."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    spot_ids: list[int]
    expressions: Any = Field(..., description="n x G")
    expr_embeddings: Any = Field(default=None, description="n x d_z or None")

    def __len__(self) -> int:
        return len(self.spot_ids)


class Dataset:
    """In-memory dataset with a guarded ``revealed`` set.

    Everything except the revealed set is read-only after construction and
    may be shared across threads.
    """

    def __init__(
        self,
        spots: Sequence[SpotRecord],
        features: Matrix,
        expressions: Matrix,
        reference: SingleCellReference,
        expr_embeddings: Matrix | None = None,
        planted_types: npt.NDArray[np.int64] | None = None,
    ) -> None:
        n = len(spots)
        for name, matrix in (
            ("features", features),
            ("expressions", expressions),
            ("expr_embeddings", expr_embeddings),
        ):
            if matrix is not None and matrix.shape[0] != n:
                raise SchemaError(
                    f"{name} has {matrix.shape[0]} rows but there are {n} spots"
                )
        if planted_types is not None and planted_types.shape != (n,):
            raise SchemaError("planted_types length differs from the spot count")
        if expr_embeddings is not None and expr_embeddings.shape[1] != np.asarray(
            reference.embeddings
        ).shape[1]:
            raise SchemaError("expr_embeddings width differs from the reference width")

        self.spots = list(spots)
        self.features = features
        self.expressions = expressions
        self.expr_embeddings = expr_embeddings
        self.reference = reference
        self.planted_types = planted_types
        self.spot_ids = np.array([s.spot_id for s in self.spots], dtype=np.int64)
        self.slide_ids = np.array([s.slide_id for s in self.spots], dtype=np.int64)
        self._row_of = {int(sid): i for i, sid in enumerate(self.spot_ids)}
        if len(self._row_of) != n:
            raise SchemaError("spot ids are not unique")
        self._revealed: set[int] = set()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.spots)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def gene_count(self) -> int:
        return int(self.expressions.shape[1])

    @property
    def revealed(self) -> frozenset[int]:
        with self._lock:
            return frozenset(self._revealed)

    def coords(self) -> npt.NDArray[np.float64]:
        """N x 2 spot coordinates."""
        return np.array([[s.x, s.y] for s in self.spots], dtype=np.float64).reshape(
            len(self.spots), 2
        )

    def index_of(self, spot_ids: Iterable[int]) -> npt.NDArray[np.int64]:
        """Matrix rows for ``spot_ids`` (same order); unknown id -> KeyError."""
        rows = []
        for sid in spot_ids:
            key = int(sid)
            if key not in self._row_of:
                raise KeyError(f"unknown spot id {key}")
            rows.append(self._row_of[key])
        return np.array(rows, dtype=np.int64)

    def reveal(self, spot_ids: Iterable[int]) -> ExpressionBatch:
        """Simulate sequencing: return expression rows and mark them revealed.

        Rows come back in dataset row order; revealing an id twice is a no-op
        on the revealed set and returns the same values.
        """
        rows = np.sort(np.unique(self.index_of(spot_ids)))
        ids = [int(i) for i in self.spot_ids[rows]]
        with self._lock:
            self._revealed.update(ids)
        return ExpressionBatch(
            spot_ids=ids,
            expressions=self.expressions[rows].copy(),
            expr_embeddings=(
                None if self.expr_embeddings is None else self.expr_embeddings[rows].copy()
            ),
        )

    def ground_truth(self, spot_ids: Iterable[int]) -> Matrix:
        """Expression rows for evaluation; does not touch the revealed set."""
        return self.expressions[self.index_of(spot_ids)].copy()

    def subset(self, spot_ids: Iterable[int]) -> "Dataset":
        """A new dataset restricted to ``spot_ids`` (dataset row order kept)."""
        rows = np.sort(np.unique(self.index_of(spot_ids)))
        spots = [
            self.spots[r].model_copy(update={"row": i}) for i, r in enumerate(rows)
        ]
        return Dataset(
            spots=spots,
            features=self.features[rows],
            expressions=self.expressions[rows],
            reference=self.reference,
            expr_embeddings=None if self.expr_embeddings is None else self.expr_embeddings[rows],
            planted_types=None if self.planted_types is None else self.planted_types[rows],
        )


def normalize_slide_coordinates(
    coords: npt.ArrayLike, slide_ids: npt.ArrayLike
) -> npt.NDArray[np.float64]:
    """Min-max normalize coordinates to [0, 1] independently per slide and axis.

    An axis with zero range on a slide maps to 0.5.
    """
    xy = np.asarray(coords, dtype=np.float64)
    slides = np.asarray(slide_ids)
    out = np.empty_like(xy)
    for slide in np.unique(slides):
        mask = slides == slide
        block = xy[mask]
        lo = block.min(axis=0)
        span = block.max(axis=0) - lo
        safe = np.where(span > 0, span, 1.0)
        out[mask] = np.where(span > 0, (block - lo) / safe, 0.5)
    return out


def _read_csv(path: Path, columns: list[str]) -> pd.DataFrame:
    frame = pd.read_csv(path, encoding="utf-8")
    if list(frame.columns) != columns:
        raise SchemaError(
            f"{path.name}: expected header {','.join(columns)}, "
            f"got {','.join(map(str, frame.columns))}"
        )
    return frame


def load_dataset(directory: str | Path, normalize_coordinates: bool = False) -> Dataset:
    """Load and cross-validate a dataset directory; ``revealed`` starts empty.

    Raises:
        SchemaError: headers or row counts disagree between files.
        ValueError: a coordinate lies outside [0, 1] (without normalization).
        FileNotFoundError: a required file is missing.
    """
    root = Path(directory)
    spots_frame = _read_csv(root / SPOTS_FILE, SPOT_COLUMNS)
    features = load_matrix(root / FEATURES_FILE)
    expressions = load_matrix(root / EXPRESSIONS_FILE)
    embeddings_path = root / EXPR_EMBEDDINGS_FILE
    expr_embeddings = load_matrix(embeddings_path) if embeddings_path.exists() else None

    n = len(spots_frame)
    for name, matrix in (
        (FEATURES_FILE, features),
        (EXPRESSIONS_FILE, expressions),
        (EXPR_EMBEDDINGS_FILE, expr_embeddings),
    ):
        if matrix is not None and matrix.shape[0] != n:
            raise SchemaError(f"{name} has {matrix.shape[0]} rows, {SPOTS_FILE} has {n}")

    coords = spots_frame[["x", "y"]].to_numpy(dtype=np.float64)
    if normalize_coordinates:
        coords = normalize_slide_coordinates(coords, spots_frame["slide_id"].to_numpy())
    outside = np.flatnonzero(((coords < 0.0) | (coords > 1.0)).any(axis=1))
    if outside.size:
        bad = int(outside[0])
        raise ValueError(
            f"spot {int(spots_frame['spot_id'].iloc[bad])} has coordinates "
            f"{tuple(coords[bad])} outside [0, 1]"
        )

    spots = [
        SpotRecord(spot_id=int(sid), slide_id=int(slide), x=float(x), y=float(y), row=i)
        for i, (sid, slide, (x, y)) in enumerate(
            zip(spots_frame["spot_id"], spots_frame["slide_id"], coords, strict=True)
        )
    ]

    ref_embeddings = load_matrix(root / REFERENCE_EMBEDDINGS_FILE)
    types_frame = _read_csv(root / REFERENCE_TYPES_FILE, REFERENCE_COLUMNS)
    if len(types_frame) != ref_embeddings.shape[0]:
        raise SchemaError(
            f"{REFERENCE_TYPES_FILE} has {len(types_frame)} rows, "
            f"{REFERENCE_EMBEDDINGS_FILE} has {ref_embeddings.shape[0]}"
        )
    # factorize without sorting numbers labels by first appearance.
    codes, names = pd.factorize(types_frame["type_name"].astype(str), sort=False)
    reference = SingleCellReference(
        embeddings=ref_embeddings,
        cell_types=codes.astype(np.int64),
        label_names=[str(name) for name in names],
    )

    planted = None
    planted_path = root / PLANTED_TYPES_FILE
    if planted_path.exists():
        planted_frame = _read_csv(planted_path, PLANTED_COLUMNS).set_index("spot_id")
        try:
            planted = (
                planted_frame.loc[spots_frame["spot_id"], "type_id"]
                .to_numpy()
                .astype(np.int64)
            )
        except KeyError as e:
            raise SchemaError(f"{PLANTED_TYPES_FILE} misses spot ids: {e}") from e

    ds = Dataset(
        spots=spots,
        features=features,
        expressions=expressions,
        reference=reference,
        expr_embeddings=expr_embeddings,
        planted_types=planted,
    )
    logger.info(
        "Dataset loaded",
        path=str(root),
        spots=n,
        features=features.shape[1],
        genes=expressions.shape[1],
        reference_cells=reference.n_cells,
        expr_embeddings=expr_embeddings is not None,
    )
    return ds


def _write_csv(path: Path, frame: pd.DataFrame) -> None:
    buffer = io.StringIO()
    frame.to_csv(buffer, index=False, lineterminator="\n")
    atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))


def write_dataset(
    directory: str | Path,
    spots: pd.DataFrame,
    features: npt.ArrayLike,
    expressions: npt.ArrayLike,
    reference_embeddings: npt.ArrayLike,
    reference_type_names: Sequence[str],
    expr_embeddings: npt.ArrayLike | None = None,
    planted_types: npt.ArrayLike | None = None,
) -> Path:
    """Write a dataset directory in the layout :func:`load_dataset` reads."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    _write_csv(root / SPOTS_FILE, spots[SPOT_COLUMNS])
    save_matrix(features, root / FEATURES_FILE)
    save_matrix(expressions, root / EXPRESSIONS_FILE)
    if expr_embeddings is not None:
        save_matrix(expr_embeddings, root / EXPR_EMBEDDINGS_FILE)
    save_matrix(reference_embeddings, root / REFERENCE_EMBEDDINGS_FILE)
    names = list(reference_type_names)
    _write_csv(
        root / REFERENCE_TYPES_FILE,
        pd.DataFrame({"cell_id": np.arange(len(names)), "type_name": names}),
    )
    if planted_types is not None:
        _write_csv(
            root / PLANTED_TYPES_FILE,
            pd.DataFrame(
                {"spot_id": spots["spot_id"].to_numpy(), "type_id": np.asarray(planted_types)}
            ),
        )
    return root
