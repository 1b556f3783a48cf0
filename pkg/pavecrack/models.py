"""
Data models for the crack detection toolkit.

This module defines the core entities of the system: the tiling geometry
that turns a survey frame into patches, the labeled patch samples, the
dataset manifest that partitions them into train/val/test, and the
records produced by a training run. Each model encapsulates its own
invariants; for example, a ``GridSpec`` refuses overlapping strides when
disjoint tiling is requested, and a ``TrainConfig`` refuses a fine-tune
learning rate that is not lower than the head-only one.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from django.db import models

from .exceptions import ConfigurationError, DimensionError, PersistenceError

logger = logging.getLogger(__name__)

# Survey frame and tiling defaults (MFV camera frames).
FRAME_WIDTH = 2440
FRAME_HEIGHT = 1080
PATCH_SIZE = 200
GRID_ROWS = 2
GRID_COLS = 6

IDENTITY_TAG = "identity"


class Label(models.TextChoices):
    POSITIVE = "pos", "Positive (crack present)"
    NEGATIVE = "neg", "Negative (crack absent)"
    UNLABELED = "unlabeled", "Unlabeled"


class Split(models.TextChoices):
    TRAIN = "train", "Training"
    VAL = "val", "Validation"
    TEST = "test", "Test"


class Phase(models.TextChoices):
    HEAD_ONLY = "head-only", "Head only"
    FINE_TUNE = "fine-tune", "Fine-tune"


SPLITS: tuple[str, ...] = (Split.TRAIN, Split.VAL, Split.TEST)


# -----------------------------------------------------------------------------
# Tiling
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Deterministic tiling geometry mapping a survey frame to square patches."""

    patch_size: int = PATCH_SIZE
    rows: int = GRID_ROWS
    cols: int = GRID_COLS
    origin_x: int = 620
    origin_y: int = 610
    stride_x: int | None = None
    stride_y: int | None = None
    disjoint: bool = True

    def __post_init__(self) -> None:
        # Strides default to the patch side: contiguous, non-overlapping tiles.
        if self.stride_x is None:
            object.__setattr__(self, "stride_x", self.patch_size)
        if self.stride_y is None:
            object.__setattr__(self, "stride_y", self.patch_size)
        if self.patch_size <= 0:
            raise ConfigurationError(f"patch_size must be positive, got {self.patch_size}.")
        if self.rows <= 0 or self.cols <= 0:
            raise ConfigurationError(f"Grid must have at least one cell, got {self.rows}x{self.cols}.")
        if self.origin_x < 0 or self.origin_y < 0:
            raise ConfigurationError("Grid origin must be inside the frame.")
        if self.stride_x <= 0 or self.stride_y <= 0:
            raise ConfigurationError("Grid strides must be positive.")
        if self.disjoint and (self.stride_x < self.patch_size or self.stride_y < self.patch_size):
            raise ConfigurationError(
                f"Disjoint tiling needs strides >= patch_size ({self.patch_size}), "
                f"got ({self.stride_x}, {self.stride_y})."
            )

    @property
    def patch_count(self) -> int:
        return self.rows * self.cols

    @property
    def required_width(self) -> int:
        return self.origin_x + (self.cols - 1) * self.stride_x + self.patch_size

    @property
    def required_height(self) -> int:
        return self.origin_y + (self.rows - 1) * self.stride_y + self.patch_size

    def check_frame(self, width: int, height: int) -> None:
        """Raise ``DimensionError`` naming the axis on which the grid overflows."""
        if self.required_width > width:
            raise DimensionError(
                f"Grid needs width {self.required_width} px but the frame is {width} px wide (x axis).",
                axis="x",
            )
        if self.required_height > height:
            raise DimensionError(
                f"Grid needs height {self.required_height} px but the frame is {height} px high (y axis).",
                axis="y",
            )

    def cell_origin(self, row: int, col: int) -> tuple[int, int]:
        return self.origin_x + col * self.stride_x, self.origin_y + row * self.stride_y

    def cells(self) -> Iterator[tuple[int, int, int, int]]:
        """Yield ``(row, col, x, y)`` in row-major order."""
        for row in range(self.rows):
            for col in range(self.cols):
                x, y = self.cell_origin(row, col)
                yield row, col, x, y

    def label(self) -> str:
        return f"{self.rows}x{self.cols}"


@dataclass(frozen=True, eq=False)
class PatchSample:
    """A square patch cut from a survey frame, with or without its pixels loaded.

    ``pixels`` is ``None`` for lightweight references (manifest entries that
    have not been read yet); ``dataset.load_pixels`` materializes them.
    """

    pixels: np.ndarray | None
    label: str = Label.UNLABELED
    source_frame_id: str = ""
    grid_row: int = 0
    grid_col: int = 0
    transform_tag: str = IDENTITY_TAG
    path: str | None = None

    @property
    def reference(self) -> tuple[str, str]:
        base = self.path or f"{self.source_frame_id}:{self.grid_row}:{self.grid_col}"
        return base, self.transform_tag

    def with_pixels(self, pixels: np.ndarray) -> PatchSample:
        return replace(self, pixels=pixels)


# -----------------------------------------------------------------------------
# Dataset manifest
# -----------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class ManifestEntry:
    path: str
    label: str
    split: str
    source_frame_id: str
    grid_row: int = 0
    grid_col: int = 0
    transform_tag: str = IDENTITY_TAG

    @property
    def reference(self) -> tuple[str, str]:
        return self.path, self.transform_tag

    def to_sample(self, root: Path | None = None) -> PatchSample:
        path = Path(self.path)
        if root is not None and not path.is_absolute():
            path = root / path
        return PatchSample(
            pixels=None,
            label=self.label,
            source_frame_id=self.source_frame_id,
            grid_row=self.grid_row,
            grid_col=self.grid_col,
            transform_tag=self.transform_tag,
            path=str(path),
        )


@dataclass
class DatasetManifest:
    """Labeled patch references partitioned into train/val/test."""

    entries: list[ManifestEntry]
    seed: int = 0
    # Directory that relative entry paths resolve against (the manifest's folder).
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def split_entries(self, split: str) -> list[ManifestEntry]:
        return [entry for entry in self.entries if entry.split == split]

    @property
    def split_counts(self) -> dict[str, int]:
        counts = {split: 0 for split in SPLITS}
        for entry in self.entries:
            counts[entry.split] = counts.get(entry.split, 0) + 1
        return counts

    @property
    def balance(self) -> dict[str, float | None]:
        """Positive fraction per split (``None`` for an empty split)."""
        out: dict[str, float | None] = {}
        for split in SPLITS:
            entries = self.split_entries(split)
            positives = sum(1 for entry in entries if entry.label == Label.POSITIVE)
            out[split] = positives / len(entries) if entries else None
        return out

    def references(self, split: str) -> list[PatchSample]:
        return [entry.to_sample(self.root) for entry in self.split_entries(split)]

    def has_augmented(self, split: str) -> bool:
        return any(entry.transform_tag != IDENTITY_TAG for entry in self.split_entries(split))


# -----------------------------------------------------------------------------
# Training records
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Two-phase transfer-learning protocol settings."""

    total_epochs: int = 80
    finetune_start_epoch: int = 60
    batch_size: int = 32
    phase1_learning_rate: float = 1e-3
    phase2_learning_rate: float = 1e-5
    replicates: int = 5
    augmented: bool = False
    unfreeze_fraction: float = 0.25
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    loss: str = "binary_crossentropy"
    optimizer: str = "adam"
    threshold: float = 0.5
    keep_best_val: bool = False
    evaluate_test: bool = True
    deterministic: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(seed) for seed in self.seeds))
        problems = []
        if self.total_epochs < 0:
            problems.append("total_epochs must be >= 0")
        if not 0 <= self.finetune_start_epoch <= self.total_epochs:
            problems.append("finetune_start_epoch must lie in [0, total_epochs]")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.phase1_learning_rate <= 0 or self.phase2_learning_rate <= 0:
            problems.append("learning rates must be positive")
        elif self.phase2_learning_rate >= self.phase1_learning_rate:
            problems.append("phase2_learning_rate must be lower than phase1_learning_rate")
        if self.replicates < 1:
            problems.append("replicates must be >= 1")
        if len(self.seeds) != self.replicates:
            problems.append(f"expected {self.replicates} seeds, got {len(self.seeds)}")
        if not 0.0 <= self.unfreeze_fraction <= 1.0:
            problems.append("unfreeze_fraction must lie in [0, 1]")
        if not 0.0 <= self.threshold <= 1.0:
            problems.append("threshold must lie in [0, 1]")
        if self.loss != "binary_crossentropy":
            problems.append(f"unsupported loss {self.loss!r}")
        if self.optimizer != "adam":
            problems.append(f"unsupported optimizer {self.optimizer!r}")
        if problems:
            raise ConfigurationError("Invalid training configuration: " + "; ".join(problems) + ".")

    @property
    def variant(self) -> str:
        return "aug" if self.augmented else "noaug"

    def learning_rate_for(self, phase: str) -> float:
        return self.phase1_learning_rate if phase == Phase.HEAD_ONLY else self.phase2_learning_rate

    def phase_of(self, epoch: int) -> str:
        return Phase.HEAD_ONLY if epoch < self.finetune_start_epoch else Phase.FINE_TUNE

    def to_dict(self) -> dict:
        data = asdict(self)
        data["seeds"] = list(self.seeds)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {name for name in cls.__dataclass_fields__}
        return cls(**{key: value for key, value in data.items() if key in known})


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    val_loss: float
    train_accuracy: float
    val_accuracy: float
    trainable_parameter_count: int
    learning_rate: float


HISTORY_COLUMNS = (
    "epoch",
    "phase",
    "train_loss",
    "train_acc",
    "val_loss",
    "val_acc",
    "trainable_params",
    "learning_rate",
)

SERIES = ("train_loss", "val_loss", "train_accuracy", "val_accuracy")


@dataclass
class RunHistory:
    """Per-epoch records of one replicate across both training phases."""

    records: list[EpochRecord]
    config: TrainConfig
    seed: int
    backbone: str = ""
    final_checkpoint: str | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def finetune_start(self) -> int | None:
        """Epoch index of the first fine-tune record, if any."""
        for record in self.records:
            if record.phase == Phase.FINE_TUNE:
                return record.epoch
        return None

    def series(self, name: str) -> np.ndarray:
        if name not in SERIES:
            raise KeyError(name)
        return np.array([getattr(record, name) for record in self.records], dtype=np.float64)

    def to_csv(self, path: Path) -> Path:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle)
                writer.writerow(HISTORY_COLUMNS)
                for record in self.records:
                    writer.writerow(
                        [
                            record.epoch,
                            record.phase,
                            repr(record.train_loss),
                            repr(record.train_accuracy),
                            repr(record.val_loss),
                            repr(record.val_accuracy),
                            record.trainable_parameter_count,
                            repr(record.learning_rate),
                        ]
                    )
        except OSError as exc:
            raise PersistenceError(f"Cannot write history {path}: {exc}") from exc
        return path

    @classmethod
    def from_csv(cls, path: Path, *, config: TrainConfig, seed: int, backbone: str = "") -> RunHistory:
        try:
            with path.open(newline="", encoding="utf-8") as handle:
                rows = list(csv.DictReader(handle))
        except OSError as exc:
            raise PersistenceError(f"Cannot read history {path}: {exc}") from exc
        records = [
            EpochRecord(
                epoch=int(row["epoch"]),
                phase=row["phase"],
                train_loss=float(row["train_loss"]),
                val_loss=float(row["val_loss"]),
                train_accuracy=float(row["train_acc"]),
                val_accuracy=float(row["val_acc"]),
                trainable_parameter_count=int(row["trainable_params"]),
                learning_rate=float(row.get("learning_rate") or "nan"),
            )
            for row in rows
        ]
        return cls(records=records, config=config, seed=seed, backbone=backbone)


def history_filename(seed: int) -> str:
    return f"history_seed{seed}.csv"


def evaluation_filename(seed: int) -> str:
    return f"evaluation_seed{seed}.json"


def experiment_dirname(backbone: str, config: TrainConfig) -> str:
    return f"{backbone}_{config.variant}"


@dataclass
class ExperimentRecord:
    """All replicates of one (backbone, variant) experiment."""

    backbone: str
    config: TrainConfig
    histories: list[RunHistory] = field(default_factory=list)
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def status(self) -> str:
        if not self.failures:
            return "complete"
        return "partial" if self.histories else "failed"

    def save(self, directory: Path) -> Path:
        payload = {
            "backbone": self.backbone,
            "variant": self.config.variant,
            "status": self.status,
            "config": self.config.to_dict(),
            "replicates": [
                {"seed": history.seed, "status": "complete", "checkpoint": history.final_checkpoint}
                for history in self.histories
            ]
            + [
                {"seed": seed, "status": "failed", "error": message}
                for seed, message in sorted(self.failures.items())
            ],
        }
        path = directory / "experiment.json"
        try:
            directory.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        except OSError as exc:
            raise PersistenceError(f"Cannot write {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, directory: Path) -> ExperimentRecord:
        path = directory / "experiment.json"
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise PersistenceError(f"Cannot read {path}: {exc}") from exc
        config = TrainConfig.from_dict(payload["config"])
        record = cls(backbone=payload["backbone"], config=config)
        for replicate in payload.get("replicates", []):
            seed = int(replicate["seed"])
            if replicate.get("status") != "complete":
                record.failures[seed] = replicate.get("error", "")
                continue
            history = RunHistory.from_csv(
                directory / history_filename(seed), config=config, seed=seed, backbone=record.backbone
            )
            history.final_checkpoint = replicate.get("checkpoint")
            record.histories.append(history)
        logger.debug("experiment loaded dir=%s replicates=%d", directory, len(record.histories))
        return record
