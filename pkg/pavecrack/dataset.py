"""
Dataset building: tiling survey frames into patches and assembling balanced,
split, persisted manifests.
"""

from __future__ import annotations

import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .augmentation import apply_transform
from .exceptions import CapacityError, ConfigurationError, DataError, FormatError, ManifestError, PersistenceError
from .models import (
    FRAME_HEIGHT,
    FRAME_WIDTH,
    GRID_COLS,
    GRID_ROWS,
    IDENTITY_TAG,
    PATCH_SIZE,
    SPLITS,
    DatasetManifest,
    GridSpec,
    Label,
    ManifestEntry,
    PatchSample,
)

logger = logging.getLogger(__name__)

MANIFEST_HEADER = "#pavecrack-manifest v1"
MANIFEST_COLUMNS = ("path", "label", "split", "source_frame_id", "grid_row", "grid_col", "transform_tag")
DEFAULT_FRACTIONS = (0.8, 0.1, 0.1)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}

_TILE_NAME = re.compile(r"^(?P<frame>.+)__r(?P<row>\d+)c(?P<col>\d+)$")


# -----------------------------------------------------------------------------
# Tiling
# -----------------------------------------------------------------------------

def default_grid(
    frame_width: int = FRAME_WIDTH,
    frame_height: int = FRAME_HEIGHT,
    rows: int = GRID_ROWS,
    cols: int = GRID_COLS,
    patch_size: int = PATCH_SIZE,
    stride_x: int | None = None,
    stride_y: int | None = None,
) -> GridSpec:
    """Grid horizontally centered and placed in the lower (near-field) half.

    Strides default to the patch side. For a 2440x1080 frame this gives 2x6
    contiguous patches of 200 px at origin (620, 610).
    """
    stride_x = patch_size if stride_x is None else stride_x
    stride_y = patch_size if stride_y is None else stride_y
    span_w = (cols - 1) * stride_x + patch_size
    span_h = (rows - 1) * stride_y + patch_size
    origin_x = max(0, (frame_width - span_w) // 2)
    half = frame_height // 2
    if span_h <= frame_height - half:
        origin_y = half + (frame_height - half - span_h) // 2
    else:
        origin_y = max(0, frame_height - span_h)
    return GridSpec(
        patch_size=patch_size, rows=rows, cols=cols, origin_x=origin_x, origin_y=origin_y,
        stride_x=stride_x, stride_y=stride_y,
    )


def check_raster(frame: np.ndarray) -> None:
    if not isinstance(frame, np.ndarray) or frame.ndim != 3 or frame.shape[2] != 3:
        shape = getattr(frame, "shape", None)
        raise FormatError(f"Expected an RGB raster of shape (height, width, 3), got {shape}.")
    if frame.dtype != np.uint8:
        raise FormatError(f"Expected 8-bit pixels, got dtype {frame.dtype}.")


def extract_patches(frame: np.ndarray, grid: GridSpec, *, frame_id: str = "") -> list[PatchSample]:
    """Cut ``grid.rows * grid.cols`` unlabeled patches out of ``frame`` (no resampling)."""
    check_raster(frame)
    height, width = frame.shape[:2]
    grid.check_frame(width, height)
    size = grid.patch_size
    return [
        PatchSample(
            pixels=frame[y:y + size, x:x + size].copy(),
            label=Label.UNLABELED,
            source_frame_id=frame_id,
            grid_row=row,
            grid_col=col,
        )
        for row, col, x, y in grid.cells()
    ]


def tile_name(sample: PatchSample) -> str:
    return f"{sample.source_frame_id}__r{sample.grid_row}c{sample.grid_col}.png"


def read_frame(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as image:
            if image.mode != "RGB":
                image = image.convert("RGB")
            return np.asarray(image, dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError) as exc:
        raise PersistenceError(f"Cannot read image {path}: {exc}") from exc


def write_patches(patches: Iterable[PatchSample], directory: Path) -> list[Path]:
    try:
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for sample in patches:
            path = directory / tile_name(sample)
            Image.fromarray(sample.pixels).save(path, format="PNG")
            paths.append(path)
    except OSError as exc:
        raise PersistenceError(f"Cannot write patches to {directory}: {exc}") from exc
    return paths


def tile_frames(
    frame_paths: Sequence[Path],
    out_dir: Path,
    *,
    rows: int = GRID_ROWS,
    cols: int = GRID_COLS,
    patch_size: int = PATCH_SIZE,
) -> int:
    """Tile every frame with its default grid and write the patches as PNG."""
    written = 0
    for path in frame_paths:
        frame = read_frame(path)
        grid = default_grid(frame.shape[1], frame.shape[0], rows=rows, cols=cols, patch_size=patch_size)
        written += len(write_patches(extract_patches(frame, grid, frame_id=path.stem), out_dir))
    logger.info("frames tiled frames=%d patches=%d out=%s", len(frame_paths), written, out_dir)
    return written


def collect_patches(directory: Path, label: str) -> list[PatchSample]:
    """Reference every image under ``directory`` as a sample of ``label``."""
    if not directory.is_dir():
        raise PersistenceError(f"Patch directory not found: {directory}")
    samples = []
    for path in sorted(directory.rglob("*")):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        match = _TILE_NAME.match(path.stem)
        if match:
            frame_id, row, col = match["frame"], int(match["row"]), int(match["col"])
        else:
            frame_id, row, col = path.stem, 0, 0
        samples.append(
            PatchSample(pixels=None, label=label, source_frame_id=frame_id, grid_row=row, grid_col=col, path=str(path))
        )
    return samples


# -----------------------------------------------------------------------------
# Manifest construction
# -----------------------------------------------------------------------------

def _largest_remainder(total: int, fractions: Sequence[Fraction]) -> list[int]:
    quotas = [total * fraction for fraction in fractions]
    counts = [math.floor(quota) for quota in quotas]
    leftover = total - sum(counts)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for index in order[:leftover]:
        counts[index] += 1
    return counts


def _class_quotas(split_sizes: Sequence[int]) -> dict[str, dict[str, int]]:
    """Halve every split; odd splits give their extra sample alternately to each class."""
    quotas: dict[str, dict[str, int]] = {}
    extra_to_positive = True
    for split, size in zip(SPLITS, split_sizes):
        half = size // 2
        pos, neg = half, half
        if size % 2:
            if extra_to_positive:
                pos += 1
            else:
                neg += 1
            extra_to_positive = not extra_to_positive
        quotas[split] = {Label.POSITIVE: pos, Label.NEGATIVE: neg}
    return quotas


def _parse_fractions(split_fractions: Sequence[float]) -> list[Fraction]:
    if len(split_fractions) != 3:
        raise ConfigurationError(f"Expected three split fractions (train, val, test), got {len(split_fractions)}.")
    fractions = [Fraction(value).limit_denominator(10**6) for value in split_fractions]
    if any(fraction < 0 for fraction in fractions) or sum(fractions) != 1:
        raise ConfigurationError(f"Split fractions must be non-negative and sum to 1, got {tuple(split_fractions)}.")
    return fractions


def _canonical(samples: Iterable[PatchSample]) -> list[PatchSample]:
    return sorted(samples, key=lambda s: (s.reference, s.source_frame_id, s.grid_row, s.grid_col))


def _frame_key(sample: PatchSample) -> str:
    return sample.source_frame_id or "::".join(sample.reference)


def build_manifest(
    positive_patches: Iterable[PatchSample],
    negative_patches: Iterable[PatchSample],
    split_fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
    *,
    sizes: Sequence[int] | None = None,
    separate_frames: bool = True,
) -> DatasetManifest:
    """Assemble a balanced train/val/test manifest.

    The result depends only on the two input multisets, the fractions and the
    seed. Each split is 50/50 positive/negative (an odd split is off by one).
    """
    fractions = _parse_fractions(split_fractions)
    pools = {
        Label.POSITIVE: _canonical(positive_patches),
        Label.NEGATIVE: _canonical(negative_patches),
    }
    available = {label: len(pool) for label, pool in pools.items()}

    if sizes is None:
        per_class = min(available.values())
        split_sizes = _largest_remainder(2 * per_class, fractions)
        surplus = max(available.values()) - per_class
        if surplus:
            logger.warning("unbalanced classes surplus=%d dropped (positives=%d negatives=%d)",
                           surplus, available[Label.POSITIVE], available[Label.NEGATIVE])
    else:
        split_sizes = [int(size) for size in sizes]
        if len(split_sizes) != 3 or any(size < 0 for size in split_sizes):
            raise ConfigurationError(f"Split sizes must be three non-negative integers, got {tuple(sizes)}.")

    quotas = _class_quotas(split_sizes)
    shortfalls = {
        label: sum(quotas[split][label] for split in SPLITS) - available[label] for label in pools
    }
    if sum(split_sizes) == 0 or any(value > 0 for value in shortfalls.values()):
        shortfall = max(max(shortfalls.values()), 1)
        details = ", ".join(
            f"{label.label.lower()}: need {available[label] + shortfalls[label]}, have {available[label]}"
            for label in pools
        )
        raise CapacityError(f"Not enough samples for the requested splits ({details}).", shortfall=shortfall)

    rng = np.random.default_rng(seed)
    assigned: dict[str, list[tuple[PatchSample, str]]] = {split: [] for split in SPLITS}
    remaining = {split: dict(quotas[split]) for split in SPLITS}

    def deficit(split: str) -> Fraction:
        target = split_sizes[SPLITS.index(split)]
        if not target:
            return Fraction(-1)
        return Fraction(sum(remaining[split].values()), target)

    if separate_frames:
        frames: dict[str, dict[str, list[PatchSample]]] = defaultdict(lambda: defaultdict(list))
        for label, pool in pools.items():
            for sample in pool:
                frames[_frame_key(sample)][label].append(sample)
        frame_ids = sorted(frames)
        loose: list[tuple[PatchSample, str]] = []
        for index in rng.permutation(len(frame_ids)):
            members = frames[frame_ids[index]]
            fitting = [
                split for split in SPLITS
                if all(len(members[label]) <= remaining[split][label] for label in pools)
                and any(remaining[split][label] for label in pools)
            ]
            if not fitting:
                loose.extend((sample, label) for label in pools for sample in members[label])
                continue
            split = max(fitting, key=lambda s: (deficit(s), -SPLITS.index(s)))
            for label in pools:
                for sample in members[label]:
                    assigned[split].append((sample, label))
                    remaining[split][label] -= 1
        for index in rng.permutation(len(loose)):
            sample, label = loose[index]
            open_splits = [split for split in SPLITS if remaining[split][label] > 0]
            if not open_splits:
                continue
            split = max(open_splits, key=lambda s: (deficit(s), -SPLITS.index(s)))
            assigned[split].append((sample, label))
            remaining[split][label] -= 1
    else:
        for label, pool in pools.items():
            order = rng.permutation(len(pool))
            cursor = 0
            for split in SPLITS:
                count = quotas[split][label]
                assigned[split].extend((pool[i], label) for i in order[cursor:cursor + count])
                cursor += count

    entries: list[ManifestEntry] = []
    for split in SPLITS:
        members = assigned[split]
        for index in rng.permutation(len(members)):
            sample, label = members[index]
            entries.append(
                ManifestEntry(
                    path=sample.path or sample.reference[0],
                    label=str(label),
                    split=str(split),
                    source_frame_id=sample.source_frame_id,
                    grid_row=sample.grid_row,
                    grid_col=sample.grid_col,
                    transform_tag=sample.transform_tag,
                )
            )

    manifest = DatasetManifest(entries=entries, seed=seed)
    if separate_frames:
        spread = _frames_across_splits(manifest)
        if spread:
            logger.warning("frames split across partitions count=%d", len(spread))
    logger.info("manifest built seed=%d counts=%s", seed, manifest.split_counts)
    return manifest


def _frames_across_splits(manifest: DatasetManifest) -> list[str]:
    seen: dict[str, set[str]] = defaultdict(set)
    for entry in manifest.entries:
        if entry.source_frame_id:
            seen[entry.source_frame_id].add(entry.split)
    return sorted(frame for frame, splits in seen.items() if len(splits) > 1)


# -----------------------------------------------------------------------------
# Validation
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class Finding:
    kind: str
    message: str
    severity: str = "error"


@dataclass
class ValidationReport:
    split_counts: dict[str, int]
    balance: dict[str, float | None]
    findings: list[Finding] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not any(finding.severity == "error" for finding in self.findings)

    def of_kind(self, kind: str) -> list[Finding]:
        return [finding for finding in self.findings if finding.kind == kind]

    def render(self) -> str:
        lines = ["status: " + ("pass" if self.passed else "fail")]
        for split in SPLITS:
            balance = self.balance.get(split)
            shown = "-" if balance is None else f"{balance:.4f}"
            lines.append(f"{split}: {self.split_counts.get(split, 0)} samples, positive fraction {shown}")
        lines.extend(f"[{finding.severity}] {finding.kind}: {finding.message}" for finding in self.findings)
        return "\n".join(lines)


def validate_manifest(
    manifest: DatasetManifest,
    *,
    check_files: bool = True,
    expected_sizes: Sequence[int] | None = None,
) -> ValidationReport:
    """Check every manifest invariant; problems become findings, never exceptions."""
    report = ValidationReport(split_counts=manifest.split_counts, balance=manifest.balance)
    findings = report.findings

    for split in SPLITS:
        entries = manifest.split_entries(split)
        if not entries:
            findings.append(Finding("empty-split", f"empty split: {split}"))
            continue
        positives = sum(1 for entry in entries if entry.label == Label.POSITIVE)
        negatives = sum(1 for entry in entries if entry.label == Label.NEGATIVE)
        if abs(positives - negatives) > 1:
            findings.append(
                Finding("imbalance", f"{split} has {positives} positive and {negatives} negative samples")
            )
        seen: set[tuple[str, str]] = set()
        for entry in entries:
            if entry.reference in seen:
                findings.append(Finding("duplicate", f"{entry.path} [{entry.transform_tag}] repeated in {split}"))
            seen.add(entry.reference)

    unknown_labels = sorted({entry.label for entry in manifest.entries} - {Label.POSITIVE, Label.NEGATIVE})
    unknown_splits = sorted({entry.split for entry in manifest.entries} - set(SPLITS))
    if unknown_labels:
        findings.append(Finding("label", f"unknown labels: {', '.join(unknown_labels)}"))
    if unknown_splits:
        findings.append(Finding("split", f"unknown splits: {', '.join(unknown_splits)}"))

    splits_by_path: dict[str, set[str]] = defaultdict(set)
    for entry in manifest.entries:
        splits_by_path[entry.path].add(entry.split)
    for path, splits in sorted(splits_by_path.items()):
        if len(splits) > 1:
            findings.append(Finding("leakage", f"{path} appears in {', '.join(sorted(splits))}"))

    spread = _frames_across_splits(manifest)
    if spread:
        findings.append(
            Finding("frame-overlap", f"{len(spread)} source frames span several splits", severity="warning")
        )

    if expected_sizes is not None:
        actual = tuple(report.split_counts[split] for split in SPLITS)
        if actual != tuple(expected_sizes):
            findings.append(Finding("size", f"split sizes {actual} differ from expected {tuple(expected_sizes)}"))

    if check_files:
        missing = [
            entry.path for entry in manifest.entries
            if not Path(entry.to_sample(manifest.root).path).is_file()
        ]
        if missing:
            preview = ", ".join(sorted(set(missing))[:5])
            findings.append(Finding("missing-file", f"{len(missing)} entries reference missing files ({preview})"))

    return report


# -----------------------------------------------------------------------------
# Persistence
# -----------------------------------------------------------------------------

def write_manifest(manifest: DatasetManifest, path: Path) -> Path:
    """Persist ``manifest`` as UTF-8 TSV; paths inside the manifest folder become relative."""
    root = path.parent.resolve()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as handle:
            handle.write(f"{MANIFEST_HEADER}\tseed={manifest.seed}\n")
            handle.write("# " + "\t".join(MANIFEST_COLUMNS) + "\n")
            for entry in manifest.entries:
                stored = Path(entry.to_sample(manifest.root).path)
                try:
                    stored = stored.resolve().relative_to(root)
                except ValueError:
                    pass
                fields = (
                    stored.as_posix(),
                    entry.label,
                    entry.split,
                    entry.source_frame_id,
                    str(entry.grid_row),
                    str(entry.grid_col),
                    entry.transform_tag,
                )
                handle.write("\t".join(str(value) for value in fields) + "\n")
    except OSError as exc:
        raise PersistenceError(f"Cannot write manifest {path}: {exc}") from exc
    logger.info("manifest written path=%s entries=%d", path, len(manifest))
    return path


def read_manifest(path: Path) -> DatasetManifest:
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise PersistenceError(f"Cannot read manifest {path}: {exc}") from exc
    if not lines or not lines[0].startswith(MANIFEST_HEADER):
        raise ManifestError(f"{path} is not a pavecrack manifest (missing '{MANIFEST_HEADER}' header).")
    seed = 0
    for token in lines[0].split()[2:]:
        if token.startswith("seed="):
            seed = int(token.split("=", 1)[1])
    entries = []
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != len(MANIFEST_COLUMNS):
            raise ManifestError(f"{path}:{number}: expected {len(MANIFEST_COLUMNS)} fields, got {len(fields)}.")
        rel_path, label, split, frame_id, row, col, tag = fields
        if label not in (Label.POSITIVE, Label.NEGATIVE):
            raise ManifestError(f"{path}:{number}: label must be pos or neg, got {label!r}.")
        try:
            entries.append(ManifestEntry(rel_path, label, split, frame_id, int(row), int(col), tag or IDENTITY_TAG))
        except ValueError as exc:
            raise ManifestError(f"{path}:{number}: {exc}") from exc
    return DatasetManifest(entries=entries, seed=seed, root=path.parent)


def load_pixels(sample: PatchSample) -> PatchSample:
    """Return ``sample`` with its pixels read from disk and its transform applied."""
    if sample.pixels is not None:
        return sample
    if not sample.path:
        raise DataError(f"Sample {sample.reference} has neither pixels nor a file path.")
    pixels = read_frame(Path(sample.path))
    return sample.with_pixels(apply_transform(pixels, sample.transform_tag))


def load_split(manifest: DatasetManifest, split: str) -> Iterator[PatchSample]:
    """Yield every entry of ``split`` once, in manifest order, with pixels loaded."""
    if split not in SPLITS:
        raise DataError(f"Unknown split {split!r}; expected one of {', '.join(SPLITS)}.")
    for sample in manifest.references(split):
        yield load_pixels(sample)
