from __future__ import annotations

from pathlib import Path

from django.core.management.base import CommandError

from pavecrack.dataset import read_manifest, validate_manifest

from ._base import PavecrackCommand


class Command(PavecrackCommand):
    help = "Check a manifest's invariants and print a report to standard output."

    def add_arguments(self, parser):
        parser.add_argument("--manifest", required=True, type=Path)
        parser.add_argument(
            "--skip-file-check", action="store_true", help="Do not check that referenced patch files exist"
        )

    def handle(self, *args, **options):
        report = validate_manifest(read_manifest(options["manifest"]), check_files=not options["skip_file_check"])
        self.stdout.write(report.render())
        if not report.passed:
            raise CommandError("Manifest validation failed.")
