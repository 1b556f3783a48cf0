from __future__ import annotations

from pathlib import Path

from pavecrack.augmentation import TransformSet, expand_dataset
from pavecrack.dataset import read_manifest, write_manifest

from ._base import PavecrackCommand


class Command(PavecrackCommand):
    help = "Expand manifest splits with exact flips and right-angle rotations."

    def add_arguments(self, parser):
        parser.add_argument("--manifest", required=True, type=Path)
        parser.add_argument("--out", required=True, type=Path, help="Expanded manifest to write")
        parser.add_argument("--transforms", default="hflip,vflip,rot90,rot180,rot270")
        parser.add_argument("--splits", default="train", help="Comma-separated splits to expand")

    def handle(self, *args, **options):
        manifest = read_manifest(options["manifest"])
        splits = [split.strip() for split in options["splits"].split(",") if split.strip()]
        expanded = expand_dataset(manifest, TransformSet.parse(options["transforms"]), splits)
        write_manifest(expanded, options["out"])
