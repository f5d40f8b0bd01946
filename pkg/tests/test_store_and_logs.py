from __future__ import annotations

import sqlite3

import numpy as np
import pytest

from app.db import StoreConfig, get_connection, read_artifact, write_artifact
from app.errors import CheckpointCorruptError
from app.logs import configure_logging, format_line, log_event


def test_artifact_round_trip_keeps_dtypes_and_scalars(tmp_artifact):
    arrays = {
        "scalar": np.asarray(0.25),
        "matrix": np.arange(6, dtype=np.float32).reshape(2, 3),
        "bytes": np.frombuffer(b"\x00\x01\xff", dtype=np.uint8),
        "strided": np.arange(12.0).reshape(3, 4)[:, ::2],
    }
    write_artifact(tmp_artifact, "bundle", {"note": {"a": [1, 2]}}, arrays)
    meta, loaded = read_artifact(tmp_artifact, "bundle")
    assert meta["note"] == {"a": [1, 2]}
    assert meta["kind"] == "bundle"
    for name, arr in arrays.items():
        assert loaded[name].dtype == arr.dtype
        assert loaded[name].shape == arr.shape
        assert np.array_equal(loaded[name], arr)


def test_rewriting_replaces_the_file(tmp_artifact):
    write_artifact(tmp_artifact, "bundle", {}, {"old": np.zeros(3)})
    write_artifact(tmp_artifact, "bundle", {}, {"new": np.ones(2)})
    _, loaded = read_artifact(tmp_artifact, "bundle")
    assert list(loaded) == ["new"]


def test_parent_directories_are_created(tmp_path):
    path = tmp_path / "a" / "b" / "artifact.db"
    write_artifact(path, "bundle", {}, {"x": np.zeros(1)})
    assert path.is_file()


def test_connection_requires_existing_file_unless_creating(tmp_path):
    with pytest.raises(FileNotFoundError):
        with get_connection(StoreConfig.for_path(tmp_path / "missing.db")):
            pass


def test_kind_is_verified(tmp_artifact):
    write_artifact(tmp_artifact, "bundle", {}, {"x": np.zeros(1)})
    with pytest.raises(CheckpointCorruptError):
        read_artifact(tmp_artifact, "checkpoint")


def test_unreadable_meta_json_is_corrupt(tmp_artifact):
    write_artifact(tmp_artifact, "bundle", {"note": 1}, {"x": np.zeros(1)})
    with sqlite3.connect(tmp_artifact) as conn:
        conn.execute("UPDATE meta SET value = '{bad' WHERE key = 'note';")
    with pytest.raises(CheckpointCorruptError, match="meta"):
        read_artifact(tmp_artifact, "bundle")


def test_log_line_format():
    line = format_line("INFO", "TRAIN_STEP", source="harness", fields={"step": 3, "loss": 0.123456789, "ok": True})
    parts = line.split(" ")
    assert parts[1:4] == ["harness", "LEVEL=INFO", "EVENT=TRAIN_STEP"]
    assert parts[4:] == ["step=3", "loss=0.123457", "ok=true"]
    assert parts[0].endswith("Z")


def test_log_line_skips_none_and_quotes_spaces():
    line = format_line("ERROR", "ERROR", source="cli", fields={"message": "bad value", "site": None})
    assert line.endswith('message="bad value"')
    assert "site=" not in line


def test_log_file_and_quiet_mode(tmp_path, capsys):
    configure_logging(log_dir=tmp_path, quiet=True)
    log_event("INFO", "HIDDEN", value=1)
    log_event("ERROR", "SHOWN", value=2)
    out = capsys.readouterr().out
    assert "SHOWN" in out and "HIDDEN" not in out
    written = (tmp_path / "quovla.log").read_text(encoding="utf-8").splitlines()
    assert [line.split(" ")[3] for line in written] == ["EVENT=HIDDEN", "EVENT=SHOWN"]


def test_unwritable_log_dir_is_ignored(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("", encoding="utf-8")
    configure_logging(log_dir=blocker / "logs", quiet=False)
    assert "EVENT=STILL_PRINTED" in log_event("INFO", "STILL_PRINTED")
    assert "STILL_PRINTED" in capsys.readouterr().out
