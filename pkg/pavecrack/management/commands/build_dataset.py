from __future__ import annotations

from pathlib import Path

from django.core.management.base import CommandError

from pavecrack.dataset import (
    DEFAULT_FRACTIONS,
    IMAGE_SUFFIXES,
    build_manifest,
    collect_patches,
    tile_frames,
    write_manifest,
)
from pavecrack.forms import parse_grid
from pavecrack.models import PATCH_SIZE, Label

from ._base import PavecrackCommand


def _numbers(text: str, kind):
    try:
        return tuple(kind(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise CommandError(f"Expected a comma-separated list of numbers, got {text!r}.")


class Command(PavecrackCommand):
    help = "Tile survey frames and/or assemble a balanced train/val/test manifest from labeled patches."

    def add_arguments(self, parser):
        parser.add_argument("--out", required=True, type=Path, help="Manifest file to write")
        parser.add_argument("--frames", type=Path, help="Survey frames to tile into unlabeled/ beside the manifest")
        parser.add_argument("--pos", type=Path, help="Directory of crack (positive) patches")
        parser.add_argument("--neg", type=Path, help="Directory of crack-free (negative) patches")
        parser.add_argument("--grid", default="2x6", help="Tiling grid as ROWSxCOLS (default 2x6)")
        parser.add_argument("--patch-size", type=int, default=PATCH_SIZE, help="Patch side in pixels")
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument(
            "--fractions",
            default=",".join(str(value) for value in DEFAULT_FRACTIONS),
            help="train,val,test fractions (default 0.8,0.1,0.1)",
        )
        parser.add_argument("--sizes", help="Explicit train,val,test sizes; overrides --fractions budgets")
        parser.add_argument(
            "--no-frame-separation",
            action="store_true",
            help="Allow patches of one source frame to land in different splits",
        )

    def handle(self, *args, **options):
        out: Path = options["out"]
        if options["frames"] is None and options["pos"] is None and options["neg"] is None:
            raise CommandError("Nothing to do: give --frames and/or --pos with --neg.")

        if options["frames"] is not None:
            rows, cols = parse_grid(options["grid"])
            frames = sorted(
                path for path in options["frames"].iterdir() if path.suffix.lower() in IMAGE_SUFFIXES
            ) if options["frames"].is_dir() else []
            if not frames:
                raise CommandError(f"No frames found in {options['frames']}.")
            tile_frames(frames, out.parent / "unlabeled", rows=rows, cols=cols, patch_size=options["patch_size"])

        if options["pos"] is None and options["neg"] is None:
            return
        if options["pos"] is None or options["neg"] is None:
            raise CommandError("--pos and --neg must be given together.")

        manifest = build_manifest(
            collect_patches(options["pos"], Label.POSITIVE),
            collect_patches(options["neg"], Label.NEGATIVE),
            _numbers(options["fractions"], float),
            options["seed"],
            sizes=_numbers(options["sizes"], int) if options["sizes"] else None,
            separate_frames=not options["no_frame_separation"],
        )
        write_manifest(manifest, out)
