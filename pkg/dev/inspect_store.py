from __future__ import annotations

import json
import sqlite3
import sys
from pathlib import Path

import numpy as np


# Simple ANSI color helpers for readability in a terminal.
class _Color:
    RESET = "\033[0m"
    BOLD = "\033[1m"
    DIM = "\033[2m"
    CYAN = "\033[36m"
    YELLOW = "\033[33m"
    GREEN = "\033[32m"
    ORANGE = "\033[38;5;208m"


def _color(text: str, color: str) -> str:
    return f"{color}{text}{_Color.RESET}"


def _format_with_dots(n: int) -> str:
    """Format an integer with dots as thousands separators (e.g. 96.703.164)."""
    return f"{n:,}".replace(",", ".")


def _print_meta(cursor: sqlite3.Cursor) -> None:
    print(_color("\n=== meta ===", _Color.BOLD))
    for key, value in cursor.execute("SELECT key, value FROM meta ORDER BY key;"):
        text = value if len(value) <= 100 else value[:97] + "..."
        color = _Color.ORANGE if key in ("kind", "format_version") else _Color.CYAN
        print(f"{_color(key, color)} = {text}")


def _print_arrays(cursor: sqlite3.Cursor) -> None:
    print(_color("\n=== arrays ===", _Color.BOLD))
    rows = cursor.execute("SELECT name, dtype, shape, data FROM arrays ORDER BY name;").fetchall()
    if not rows:
        print(_color("(no arrays)", _Color.DIM))
        return
    total = 0
    for name, dtype, shape, data in rows:
        arr = np.frombuffer(data, dtype=np.dtype(dtype)).reshape(json.loads(shape))
        total += len(data)
        stats = ""
        if arr.size and np.issubdtype(arr.dtype, np.floating):
            finite = np.isfinite(arr).all()
            stats = f" |x|max={np.abs(arr).max():.3g}"
            if not finite:
                stats += _color(" NON-FINITE", _Color.YELLOW)
        print(f"{_color(name, _Color.GREEN)}  {dtype} {tuple(arr.shape)}{stats}")
    print(_color(f"\n{len(rows)} arrays, {_format_with_dots(total)} bytes", _Color.DIM))


def main() -> int:
    if len(sys.argv) != 2:
        print(_color("usage: inspect_store.py <artifact.db>", _Color.YELLOW))
        return 1
    path = Path(sys.argv[1])
    if not path.is_file():
        print(_color(f"Artifact file not found at: {path}", _Color.YELLOW))
        return 1

    conn = sqlite3.connect(path)
    try:
        cur = conn.cursor()
        try:
            _print_meta(cur)
            _print_arrays(cur)
        except sqlite3.DatabaseError as exc:
            print(_color(f"(not a readable artifact: {exc})", _Color.YELLOW))
            return 1
    finally:
        conn.close()

    return 0


if __name__ == "__main__":
    raise SystemExit(main())
