"""
Frame-level crack detection: tile a survey frame, classify every cell
independently and annotate the positive cells.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image, ImageDraw

from .dataset import check_raster, extract_patches
from .evaluation import DEFAULT_THRESHOLD, SupportsCrackProbability
from .exceptions import DomainError, PersistenceError, ShapeError
from .models import GridSpec, Label

logger = logging.getLogger(__name__)

OUTLINE_COLOR = (255, 0, 0)
OUTLINE_WIDTH = 3


@dataclass(frozen=True)
class Detection:
    frame_id: str
    row: int
    col: int
    x: int
    y: int
    size: int
    probability: float
    label: str

    def to_dict(self) -> dict:
        data = asdict(self)
        data["label"] = str(self.label)
        return data


@dataclass(frozen=True)
class TileGrid:
    """Per-cell crack probabilities and decisions for one frame."""

    grid: GridSpec
    probabilities: np.ndarray
    threshold: float
    frame_id: str
    model_id: str
    frame_size: tuple[int, int]

    def __post_init__(self) -> None:
        if self.probabilities.shape != (self.grid.rows, self.grid.cols):
            raise ShapeError(
                f"Expected {self.grid.rows}x{self.grid.cols} probabilities, got {self.probabilities.shape}."
            )

    def label(self, row: int, col: int) -> str:
        return Label.POSITIVE if self.probabilities[row, col] >= self.threshold else Label.NEGATIVE

    @property
    def labels(self) -> list[list[str]]:
        return [[self.label(row, col) for col in range(self.grid.cols)] for row in range(self.grid.rows)]

    def detections(self) -> list[Detection]:
        """One record per cell, in row-major order."""
        return [
            Detection(
                frame_id=self.frame_id,
                row=row,
                col=col,
                x=x,
                y=y,
                size=self.grid.patch_size,
                probability=float(self.probabilities[row, col]),
                label=self.label(row, col),
            )
            for row, col, x, y in self.grid.cells()
        ]

    @property
    def positive_count(self) -> int:
        return int(np.sum(self.probabilities >= self.threshold))


def classify_frame(
    frame: np.ndarray,
    model: SupportsCrackProbability,
    grid: GridSpec,
    threshold: float = DEFAULT_THRESHOLD,
    *,
    frame_id: str = "",
    model_id: str = "",
) -> TileGrid:
    if not 0.0 <= threshold <= 1.0:
        raise DomainError(f"threshold must lie in [0, 1], got {threshold}.")
    patches = extract_patches(frame, grid, frame_id=frame_id)
    probabilities = np.asarray(model.predict_pixels(np.stack([patch.pixels for patch in patches])), dtype=np.float64)
    tiles = TileGrid(
        grid=grid,
        probabilities=probabilities.reshape(grid.rows, grid.cols),
        threshold=threshold,
        frame_id=frame_id,
        model_id=model_id,
        frame_size=(frame.shape[1], frame.shape[0]),
    )
    logger.info("frame classified frame=%s positives=%d/%d", frame_id, tiles.positive_count, grid.patch_count)
    return tiles


def render_overlay(frame: np.ndarray, tiles: TileGrid) -> tuple[np.ndarray, list[Detection]]:
    """Outline positive cells and print their probability inside the outline.

    Returns the annotated copy (same shape as ``frame``) and the detections
    for the positive cells.
    """
    check_raster(frame)
    height, width = frame.shape[:2]
    if (width, height) != tuple(tiles.frame_size):
        raise ShapeError(f"Tiles were computed on a {tiles.frame_size} frame, got {(width, height)}.")
    try:
        tiles.grid.check_frame(width, height)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc

    image = Image.fromarray(frame)
    draw = ImageDraw.Draw(image)
    positives = [detection for detection in tiles.detections() if detection.label == Label.POSITIVE]
    for detection in positives:
        x0, y0 = detection.x, detection.y
        x1, y1 = x0 + detection.size - 1, y0 + detection.size - 1
        draw.rectangle((x0, y0, x1, y1), outline=OUTLINE_COLOR, width=OUTLINE_WIDTH)
        draw.text((x0 + OUTLINE_WIDTH + 3, y0 + OUTLINE_WIDTH + 3), f"{detection.probability:.2f}", fill=OUTLINE_COLOR)
    return np.asarray(image, dtype=np.uint8).copy(), positives


def write_overlay(raster: np.ndarray, out_dir: Path, frame_id: str) -> Path:
    path = Path(out_dir) / f"{frame_id}_overlay.png"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(raster).save(path, format="PNG")
    except OSError as exc:
        raise PersistenceError(f"Cannot write overlay {path}: {exc}") from exc
    return path


def write_detections(tiles: Iterable[TileGrid], path: Path) -> Path:
    """Newline-delimited JSON, one object per tile."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as handle:
            for grid in tiles:
                for detection in grid.detections():
                    handle.write(json.dumps(detection.to_dict()) + "\n")
    except OSError as exc:
        raise PersistenceError(f"Cannot write detections {path}: {exc}") from exc
    return path
