"""
Offline dataset expansion by exact flips and right-angle rotations.

Augmented manifest entries keep pointing at the original patch file and
carry a transform tag; the transform is applied when the pixels are
loaded, so expanding a split never writes new images.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Iterable

import numpy as np

from .exceptions import CapacityError, ConfigurationError, DataError, GeometryError
from .models import IDENTITY_TAG, DatasetManifest, ManifestEntry, PatchSample, Split

logger = logging.getLogger(__name__)

TRANSFORMS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    IDENTITY_TAG: lambda pixels: pixels,
    "hflip": lambda pixels: pixels[:, ::-1],
    "vflip": lambda pixels: pixels[::-1, :],
    "rot90": lambda pixels: np.rot90(pixels, k=1),
    "rot180": lambda pixels: np.rot90(pixels, k=2),
    "rot270": lambda pixels: np.rot90(pixels, k=3),
}

QUARTER_TURNS = {"rot90", "rot270"}


@dataclass(frozen=True)
class TransformSet:
    """Ordered, duplicate-free set of transforms that always keeps the originals."""

    transforms: tuple[str, ...] = tuple(TRANSFORMS)

    def __post_init__(self) -> None:
        names = tuple(self.transforms)
        unknown = [name for name in names if name not in TRANSFORMS]
        if unknown:
            raise ConfigurationError(
                f"Unknown transforms: {', '.join(unknown)} (allowed: {', '.join(TRANSFORMS)})."
            )
        if len(set(names)) != len(names):
            raise ConfigurationError(f"Duplicate transforms in {names}.")
        if IDENTITY_TAG not in names:
            names = (IDENTITY_TAG, *names)
        object.__setattr__(self, "transforms", names)

    @classmethod
    def parse(cls, text: str) -> TransformSet:
        """Build a set from a comma list such as ``hflip,vflip,rot90``; identity is implied."""
        names = [name.strip() for name in text.split(",") if name.strip()]
        return cls(tuple(names))

    def __len__(self) -> int:
        return len(self.transforms)

    def __iter__(self):
        return iter(self.transforms)


def apply_transform(pixels: np.ndarray, tag: str) -> np.ndarray:
    """Apply one exact dihedral transform; the identity returns ``pixels`` itself."""
    try:
        transform = TRANSFORMS[tag]
    except KeyError:
        raise GeometryError(f"Unknown transform tag {tag!r}.") from None
    if tag == IDENTITY_TAG:
        return pixels
    if tag in QUARTER_TURNS and pixels.shape[0] != pixels.shape[1]:
        raise GeometryError(f"Quarter rotations need a square raster, got {pixels.shape[:2]}.")
    return np.ascontiguousarray(transform(pixels))


def augment_sample(sample: PatchSample, transform_set: TransformSet) -> list[PatchSample]:
    if sample.pixels is None:
        raise DataError(f"Sample {sample.reference} has no pixels loaded.")
    if QUARTER_TURNS.intersection(transform_set) and sample.pixels.shape[0] != sample.pixels.shape[1]:
        raise GeometryError(
            f"Quarter rotations need a square patch, got {sample.pixels.shape[1]}x{sample.pixels.shape[0]}."
        )
    return [
        replace(sample, pixels=apply_transform(sample.pixels, tag), transform_tag=tag)
        for tag in transform_set
    ]


def expand_dataset(
    manifest: DatasetManifest,
    transform_set: TransformSet,
    splits_to_expand: Iterable[str] = (Split.TRAIN,),
) -> DatasetManifest:
    """Grow the selected splits by exactly ``len(transform_set)``; other splits are untouched."""
    targets = set(splits_to_expand)
    for split in targets:
        entries = manifest.split_entries(split)
        if not entries:
            raise CapacityError(f"Cannot expand the empty {split} split.", shortfall=1)
        if manifest.has_augmented(split):
            raise DataError(f"The {split} split is already augmented.")

    expanded: list[ManifestEntry] = []
    for entry in manifest.entries:
        if entry.split in targets:
            expanded.extend(replace(entry, transform_tag=tag) for tag in transform_set)
        else:
            expanded.append(entry)

    result = DatasetManifest(entries=expanded, seed=manifest.seed, root=manifest.root)
    logger.info(
        "dataset expanded transforms=%s splits=%s counts=%s",
        ",".join(transform_set), ",".join(sorted(targets)), result.split_counts,
    )
    return result
