"""Filesystem and hashing helpers shared by the artifact writers.

These low-level utilities have no dependency on the project's models or
numerics, so they sit at the bottom of the import graph and every writer
(matrix files, pool files, checkpoints, sweep reports) can use them freely.
"""

import contextlib
import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any


def atomic_write_bytes(file_path: str | Path, payload: bytes) -> None:
    """Atomically write ``payload`` to ``file_path``.

    The bytes go to a temporary file in the target directory first, are
    flushed and fsynced, then renamed over the target. A failure at any step
    removes the temporary file and re-raises, so a crashed run never leaves a
    half-written matrix or report behind for the next resume to trip over.
    """
    target = Path(file_path)
    target.parent.mkdir(parents=True, exist_ok=True)

    temp_path: str | None = None
    try:
        with tempfile.NamedTemporaryFile(
            mode="wb", dir=target.parent, delete=False, suffix=".tmp"
        ) as temp_file:
            temp_path = temp_file.name
            temp_file.write(payload)
            temp_file.flush()
            os.fsync(temp_file.fileno())

        # On Windows, we need to remove the target file first if it exists
        if os.name == "nt" and target.exists():
            target.unlink()

        Path(temp_path).rename(target)
        # fsync the directory so the rename itself is durable (POSIX only).
        with contextlib.suppress(OSError, AttributeError):
            dir_fd = os.open(str(target.parent), os.O_RDONLY)
            try:
                os.fsync(dir_fd)
            finally:
                os.close(dir_fd)
    except Exception:
        if temp_path is not None:
            with contextlib.suppress(Exception):
                Path(temp_path).unlink()
        raise


def atomic_write_json(file_path: str | Path, data: Any) -> None:
    """Atomically write ``data`` as indented, key-sorted JSON."""
    text = json.dumps(data, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(file_path, text.encode("utf-8"))


def append_jsonl(file_path: str | Path, record: dict[str, Any]) -> None:
    """Append one JSON record as a line and force it to disk.

    Used for logs that must survive a crash mid-run (episode logs, sweep
    cells): every completed record is durable before the next one starts.
    """
    target = Path(file_path)
    target.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps(record, sort_keys=True) + "\n"
    with target.open("a", encoding="utf-8") as handle:
        handle.write(line)
        handle.flush()
        os.fsync(handle.fileno())


def read_jsonl(file_path: str | Path) -> list[dict[str, Any]]:
    """Read a JSON-lines file, skipping a torn trailing line if present."""
    target = Path(file_path)
    if not target.exists():
        return []
    records: list[dict[str, Any]] = []
    for raw in target.read_text(encoding="utf-8").splitlines():
        if not raw.strip():
            continue
        try:
            records.append(json.loads(raw))
        except json.JSONDecodeError:
            # Only the last line can be torn by a crash mid-append.
            break
    return records


def canonical_hash(data: Any) -> str:
    """SHA-256 hex digest of the canonical JSON encoding of ``data``."""
    encoded = json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(encoded).hexdigest()
