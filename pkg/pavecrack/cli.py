"""
The ``pavecrack`` command line.

Subcommands are spelled with dashes here and map onto the Django
management commands of the same name (with underscores), so
``pavecrack build-dataset ...`` and ``manage.py build_dataset ...`` run
the same code.
"""

from __future__ import annotations

import logging
import os
import sys
from typing import Sequence

from django.core.management import load_command_class

logger = logging.getLogger(__name__)

PROG = "pavecrack"

SUBCOMMANDS = {
    "build-dataset": "build_dataset",
    "augment": "augment",
    "train": "train",
    "evaluate": "evaluate",
    "report": "report",
    "infer": "infer",
    "validate": "validate",
}


def usage() -> str:
    lines = [f"usage: {PROG} <subcommand> [options]", "", "subcommands:"]
    for name, command in SUBCOMMANDS.items():
        lines.append(f"  {name:<14} {load_command_class('pavecrack', command).help}")
    lines.append("")
    lines.append(f"Run '{PROG} <subcommand> --help' for the options of one subcommand.")
    return "\n".join(lines)


def dispatch(argv: Sequence[str]) -> int:
    """Run one subcommand and return its exit code (0 ok, 1 failure, 2 usage error)."""
    argv = list(argv)
    if argv and argv[0] in ("-h", "--help"):
        sys.stdout.write(usage() + "\n")
        return 0
    if not argv or argv[0] not in SUBCOMMANDS:
        if argv:
            sys.stderr.write(f"{PROG}: unknown subcommand {argv[0]!r}\n")
        sys.stderr.write(usage() + "\n")
        return 2

    name = argv[0]
    command = load_command_class("pavecrack", SUBCOMMANDS[name])
    try:
        # run_from_argv turns CommandError into exit 1 and argparse errors into exit 2.
        command.run_from_argv([PROG, name, *argv[1:]])
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except Exception:
        logger.exception("subcommand crashed subcommand=%s", name)
        return 1
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "pavecrack_project.settings")
    import django

    django.setup()
    return dispatch(sys.argv[1:] if argv is None else argv)
