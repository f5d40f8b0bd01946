"""
Structured single-line logging for QuoVLA.

Format (space-separated key=value pairs where practical):

    2026-01-01T12:00:00Z harness LEVEL=INFO EVENT=TRAIN_STEP step=100 loss=0.41

Lines go to stdout and are appended to `<log_dir>/quovla.log`. File logging
must never change results, so I/O errors on the log file are swallowed.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

DEFAULT_LOG_DIR = Path("logs")
LOG_FILE_NAME = "quovla.log"


@dataclass
class _LogSettings:
    log_dir: Optional[Path] = DEFAULT_LOG_DIR
    quiet: bool = False


_SETTINGS = _LogSettings()


def configure_logging(*, log_dir: Optional[Path] = DEFAULT_LOG_DIR, quiet: bool = False) -> None:
    """Set where log lines go.

    `log_dir=None` disables the log file; `quiet=True` silences stdout except
    for ERROR lines.
    """
    _SETTINGS.log_dir = log_dir
    _SETTINGS.quiet = quiet


def _format_value(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, bool):
        return str(value).lower()
    text = str(value)
    if " " in text:
        return '"' + text.replace('"', "'") + '"'
    return text


def format_line(level: str, event: str, *, source: str, fields: dict[str, Any]) -> str:
    """Render one log line without emitting it."""
    timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")
    parts = [timestamp, source, f"LEVEL={level}", f"EVENT={event}"]
    parts.extend(f"{key}={_format_value(value)}" for key, value in fields.items() if value is not None)
    return " ".join(parts)


def log_event(level: str, event: str, *, source: str = "quovla", **fields: Any) -> str:
    """Emit a structured line and return it."""
    line = format_line(level, event, source=source, fields=fields)

    if not _SETTINGS.quiet or level == "ERROR":
        sys.stdout.write(line + "\n")
        sys.stdout.flush()

    if _SETTINGS.log_dir is not None:
        try:
            _SETTINGS.log_dir.mkdir(parents=True, exist_ok=True)
            with (_SETTINGS.log_dir / LOG_FILE_NAME).open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        except Exception:
            # Logging must not affect results; ignore file I/O errors.
            pass
    return line
