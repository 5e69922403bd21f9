"""SCRM binary matrix format.

Layout (little-endian throughout)::

    offset  size  field
    0       4     magic  b"SCRM"
    4       2     version (u16, currently 1)
    6       8     rows (u64)
    14      8     cols (u64)
    22      4·n   row-major f32 payload, n = rows·cols

Every numeric input and output of the pipeline (features, expressions,
embeddings, checkpoints) is stored in this format.
"""

import struct
from pathlib import Path

import numpy as np
import numpy.typing as npt
import structlog

from .errors import DimensionError, FormatError, MatrixWriteError, TruncationError
from .helpers import atomic_write_bytes

logger = structlog.get_logger(__name__)

Matrix = npt.NDArray[np.float32]

MAGIC = b"SCRM"
VERSION = 1
_HEADER = struct.Struct("<4sHQQ")
HEADER_SIZE = _HEADER.size  # 22
_PAYLOAD_DTYPE = np.dtype("<f4")


def first_non_finite(values: npt.NDArray[np.floating]) -> int | None:
    """Flat index of the first NaN/Inf entry, or None when all are finite."""
    bad = np.flatnonzero(~np.isfinite(values))
    return int(bad[0]) if bad.size else None


def encode_matrix(m: npt.ArrayLike) -> bytes:
    """Serialize a finite 2-D matrix to SCRM bytes."""
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise DimensionError(f"matrix must be 2-D, got shape {arr.shape}")
    payload = arr.astype(_PAYLOAD_DTYPE, copy=False)
    bad = first_non_finite(payload)
    if bad is not None:
        row, col = divmod(bad, arr.shape[1])
        raise ValueError(f"non-finite value at flat index {bad} (row {row}, col {col})")
    rows, cols = arr.shape
    return _HEADER.pack(MAGIC, VERSION, rows, cols) + payload.tobytes(order="C")


def decode_matrix(data: bytes, source: str = "<bytes>") -> Matrix:
    """Parse SCRM bytes, enforcing header, length and finiteness."""
    if len(data) < HEADER_SIZE:
        if data[: len(MAGIC)] != MAGIC[: len(data)]:
            raise FormatError(f"{source}: bad magic {data[:4]!r}")
        raise TruncationError(
            f"{source}: {len(data)} bytes is shorter than the {HEADER_SIZE}-byte header"
        )

    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")

    expected = rows * cols * _PAYLOAD_DTYPE.itemsize
    actual = len(data) - HEADER_SIZE
    if actual < expected:
        raise TruncationError(
            f"{source}: header declares {rows}x{cols} ({expected} payload bytes), "
            f"found {actual}"
        )
    if actual > expected:
        raise FormatError(
            f"{source}: {actual - expected} trailing bytes after a {rows}x{cols} payload"
        )

    values = np.frombuffer(data, dtype=_PAYLOAD_DTYPE, offset=HEADER_SIZE)
    bad = first_non_finite(values)
    if bad is not None:
        row, col = divmod(bad, cols)
        raise ValueError(
            f"{source}: non-finite value at flat index {bad} (row {row}, col {col})"
        )
    return values.astype(np.float32).reshape(rows, cols)


def save_matrix(m: npt.ArrayLike, path: str | Path) -> None:
    """Write ``m`` to ``path`` atomically in SCRM format.

    Raises:
        DimensionError: ``m`` is not 2-D.
        ValueError: ``m`` holds NaN/Inf.
        MatrixWriteError: the file could not be written (carries the path).
    """
    payload = encode_matrix(m)
    try:
        atomic_write_bytes(path, payload)
    except OSError as e:
        raise MatrixWriteError(f"cannot write matrix to {path}: {e}", path) from e
    logger.debug("Matrix saved", path=str(path), bytes=len(payload))


def load_matrix(path: str | Path) -> Matrix:
    """Read an SCRM file.

    Raises:
        FormatError: wrong magic, unknown version or trailing bytes.
        TruncationError: payload shorter than the header declares.
        ValueError: a NaN/Inf value; the message names the first bad index.
    """
    return decode_matrix(Path(path).read_bytes(), source=str(path))
