"""
SQLite artifact store for QuoVLA.

Checkpoints and datasets are single SQLite files with two tables:

    meta(key TEXT PRIMARY KEY, value TEXT)              JSON-encoded values
    arrays(name TEXT PRIMARY KEY, dtype TEXT, shape TEXT, data BLOB)

Arrays are stored as raw little-endian bytes, so a write/read round trip is
bit-exact. Every file records its `kind`, a `format_version`, and a SHA-256
digest over all arrays; readers verify all three.

This module only knows how to open files and move bytes. What goes into a
checkpoint or dataset lives in higher-level modules.
"""

from __future__ import annotations

import hashlib
import json
import sqlite3
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Mapping, Optional

import numpy as np

from app.errors import CheckpointCorruptError, CheckpointVersionError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class StoreConfig:
    """Location of one artifact file."""

    path: Path

    @classmethod
    def for_path(cls, path: str | Path) -> "StoreConfig":
        """Store settings for one artifact file."""
        return cls(path=Path(path))


def _ensure_parent_directory(path: Path) -> None:
    parent = path.parent
    if not parent.exists():
        parent.mkdir(parents=True, exist_ok=True)


def _apply_pragma_settings(conn: sqlite3.Connection) -> None:
    cursor = conn.cursor()
    # Rollback journal instead of WAL: an artifact must be one self-contained file.
    cursor.execute("PRAGMA journal_mode=DELETE;")
    cursor.execute("PRAGMA synchronous=FULL;")
    cursor.close()


def _initialize_schema(conn: sqlite3.Connection) -> None:
    cursor = conn.cursor()
    cursor.execute(
        """
        CREATE TABLE IF NOT EXISTS meta (
            key TEXT PRIMARY KEY,
            value TEXT NOT NULL
        );
        """
    )
    cursor.execute(
        """
        CREATE TABLE IF NOT EXISTS arrays (
            name TEXT PRIMARY KEY,
            dtype TEXT NOT NULL,
            shape TEXT NOT NULL,
            data BLOB NOT NULL
        );
        """
    )
    conn.commit()
    cursor.close()


@contextmanager
def get_connection(config: StoreConfig, *, create: bool = False) -> Iterator[sqlite3.Connection]:
    """Yield a connection to the artifact file.

    With `create=True` the parent directory and schema are created. Otherwise
    the file must already exist; low-level SQLite failures surface as
    `CheckpointCorruptError`. The caller commits.
    """
    if create:
        _ensure_parent_directory(config.path)
    elif not config.path.is_file():
        raise FileNotFoundError(f"artifact file not found: {config.path}")

    try:
        conn = sqlite3.connect(config.path)
    except sqlite3.Error as exc:
        raise CheckpointCorruptError(f"cannot open {config.path}: {exc}") from exc
    try:
        if create:
            _apply_pragma_settings(conn)
            _initialize_schema(conn)
        yield conn
    except sqlite3.DatabaseError as exc:
        raise CheckpointCorruptError(f"{config.path} is not a readable artifact: {exc}") from exc
    finally:
        conn.close()


def _digest(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], order="C")
        h.update(name.encode())
        h.update(arr.dtype.str.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def write_artifact(path: Path, kind: str, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    """Write (replacing) an artifact file."""
    config = StoreConfig.for_path(path)
    if config.path.exists():
        config.path.unlink()
    stored = {name: np.asarray(arr, order="C") for name, arr in arrays.items()}
    with get_connection(config, create=True) as conn:
        cursor = conn.cursor()
        try:
            header = {"kind": kind, "format_version": FORMAT_VERSION, "digest": _digest(stored), **meta}
            cursor.executemany(
                "INSERT INTO meta (key, value) VALUES (?, ?);",
                [(key, json.dumps(value)) for key, value in header.items()],
            )
            cursor.executemany(
                "INSERT INTO arrays (name, dtype, shape, data) VALUES (?, ?, ?, ?);",
                [(name, arr.dtype.str, json.dumps(list(arr.shape)), arr.tobytes()) for name, arr in stored.items()],
            )
        finally:
            cursor.close()
        conn.commit()


def read_artifact(path: Path, kind: str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Read and verify an artifact file; returns (meta, arrays)."""
    config = StoreConfig.for_path(path)
    with get_connection(config) as conn:
        cursor = conn.cursor()
        try:
            pairs = cursor.execute("SELECT key, value FROM meta;").fetchall()
            rows = cursor.execute("SELECT name, dtype, shape, data FROM arrays;").fetchall()
        finally:
            cursor.close()

    try:
        meta = {key: json.loads(value) for key, value in pairs}
    except (ValueError, TypeError) as exc:
        raise CheckpointCorruptError(f"meta table in {path} is damaged: {exc}") from exc

    if meta.get("kind") != kind:
        raise CheckpointCorruptError(f"{path} holds a {meta.get('kind')!r} artifact, expected {kind!r}")
    version: Optional[int] = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path} has format version {version}, this build reads {FORMAT_VERSION}")

    arrays: dict[str, np.ndarray] = {}
    for name, dtype, shape, data in rows:
        try:
            arrays[name] = np.frombuffer(data, dtype=np.dtype(dtype)).reshape(json.loads(shape)).copy()
        except (ValueError, TypeError) as exc:
            raise CheckpointCorruptError(f"array {name!r} in {path} is damaged: {exc}") from exc
    if _digest(arrays) != meta.get("digest"):
        raise CheckpointCorruptError(f"{path} failed its integrity check")
    return meta, arrays
