"""
Top-level CLI entry point for QuoVLA.

A thin wrapper around `app.cli.main` so that `python main.py <subcommand>`
works from a checkout without installing the package.
"""

from __future__ import annotations

import sys

from app.cli import main as cli_main


def main(argv: list[str] | None = None) -> int:
    """Delegate to the CLI and return its exit code."""
    if argv is None:
        argv = sys.argv[1:]
    return cli_main(argv)


if __name__ == "__main__":
    raise SystemExit(main())
