"""
Shared behaviour of the pavecrack management commands.
"""

from __future__ import annotations

from django.core.management.base import BaseCommand, CommandError

from pavecrack.exceptions import PavecrackError


class PavecrackCommand(BaseCommand):
    """Maps toolkit errors to ``CommandError`` (exit code 1)."""

    requires_system_checks = []
    suppressed_base_arguments = {
        "--version",
        "--settings",
        "--pythonpath",
        "--traceback",
        "--no-color",
        "--force-color",
        "--skip-checks",
    }

    def execute(self, *args, **options):
        try:
            return super().execute(*args, **options)
        except PavecrackError as exc:
            raise CommandError(str(exc)) from exc
