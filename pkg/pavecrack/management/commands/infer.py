from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from django.core.management.base import CommandError

from pavecrack.dataset import IMAGE_SUFFIXES, default_grid, read_frame
from pavecrack.evaluation import DEFAULT_THRESHOLD
from pavecrack.forms import parse_grid, parse_pair
from pavecrack.inference import classify_frame, render_overlay, write_detections, write_overlay
from pavecrack.models import PATCH_SIZE
from pavecrack.zoo import load_checkpoint

from ._base import PavecrackCommand


class Command(PavecrackCommand):
    help = "Classify every grid cell of each survey frame and write overlays plus detections."

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True, type=Path)
        parser.add_argument("--frames", required=True, type=Path)
        parser.add_argument("--grid", default="2x6", help="ROWSxCOLS (default 2x6)")
        parser.add_argument("--patch-size", type=int, default=PATCH_SIZE)
        parser.add_argument(
            "--origin", help="X,Y of the top-left cell in pixels (default: centered in the lower half of the frame)"
        )
        parser.add_argument("--stride", help="X,Y step between cells in pixels (default: the patch size)")
        parser.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
        parser.add_argument("--out", required=True, type=Path)

    def handle(self, *args, **options):
        frames_dir: Path = options["frames"]
        frames = sorted(
            path for path in frames_dir.iterdir() if path.suffix.lower() in IMAGE_SUFFIXES
        ) if frames_dir.is_dir() else []
        if not frames:
            raise CommandError(f"No frames found in {frames_dir}.")
        rows, cols = parse_grid(options["grid"])
        origin = parse_pair(options["origin"], "--origin") if options["origin"] else None
        stride_x, stride_y = parse_pair(options["stride"], "--stride") if options["stride"] else (None, None)
        model = load_checkpoint(options["checkpoint"])

        results = []
        for path in frames:
            frame = read_frame(path)
            grid = default_grid(
                frame.shape[1], frame.shape[0], rows=rows, cols=cols, patch_size=options["patch_size"],
                stride_x=stride_x, stride_y=stride_y,
            )
            if origin is not None:
                grid = replace(grid, origin_x=origin[0], origin_y=origin[1])
            tiles = classify_frame(
                frame, model, grid, options["threshold"],
                frame_id=path.stem, model_id=str(options["checkpoint"]),
            )
            raster, _ = render_overlay(frame, tiles)
            write_overlay(raster, options["out"], path.stem)
            results.append(tiles)
        write_detections(results, options["out"] / "detections.ndjson")
