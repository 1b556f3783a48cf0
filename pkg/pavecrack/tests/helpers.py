"""
Test doubles: a tiny seeded convolutional backbone that plugs into the
provider interface, and a synthetic crack generator (a dark straight line
on a noisy bright texture versus the texture alone).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from tensorflow import keras

from pavecrack.dataset import build_manifest, collect_patches, write_patches
from pavecrack.exceptions import ProvenanceError
from pavecrack.models import (
    DatasetManifest,
    EpochRecord,
    ExperimentRecord,
    Label,
    PatchSample,
    RunHistory,
    TrainConfig,
    evaluation_filename,
    history_filename,
)
from pavecrack.zoo import BackboneProvider, BackboneSpec

TINY_SIDE = 32

# Published per-variant metrics and mean confusion counts on the 1400-patch test split.
PUBLISHED = json.loads(
    (Path(__file__).resolve().parent.parent / "fixtures" / "published_tables.json").read_text(encoding="utf-8")
)


def tiny_spec(side: int = TINY_SIDE) -> BackboneSpec:
    return BackboneSpec("MobileNetV2", side, preprocessing="tf")


class TinyProvider(BackboneProvider):
    """Three seeded convolutions and one batch-normalization layer; no archive."""

    def __init__(self) -> None:
        self.pretrained_loads = 0

    def build(self, spec: BackboneSpec) -> keras.Model:
        inputs = keras.Input(shape=spec.input_shape)
        x = keras.layers.Conv2D(
            8, 3, strides=2, padding="same", activation="relu",
            kernel_initializer=keras.initializers.GlorotUniform(seed=11),
        )(inputs)
        x = keras.layers.BatchNormalization()(x)
        x = keras.layers.Conv2D(
            16, 3, strides=2, padding="same", activation="relu",
            kernel_initializer=keras.initializers.GlorotUniform(seed=12),
        )(x)
        x = keras.layers.Conv2D(
            16, 3, padding="same", activation="relu",
            kernel_initializer=keras.initializers.GlorotUniform(seed=13),
        )(x)
        return keras.Model(inputs, x, name="tiny")

    def load_pretrained(self, backbone: keras.Model, spec: BackboneSpec) -> None:
        self.pretrained_loads += 1


class FlakyProvider(TinyProvider):
    """Fails the first ``failures`` builds."""

    def __init__(self, failures: int = 1) -> None:
        super().__init__()
        self.failures = failures

    def build(self, spec: BackboneSpec) -> keras.Model:
        if self.failures:
            self.failures -= 1
            raise ProvenanceError("archive unavailable")
        return super().build(spec)


def synthetic_patch(rng: np.random.Generator, crack: bool, side: int = TINY_SIDE) -> np.ndarray:
    texture = np.clip(rng.normal(170, 12, size=(side, side)), 0, 255)
    if crack:
        margin = side // 8
        offset = int(rng.integers(margin, side - margin - 3))
        if rng.random() < 0.5:
            texture[offset:offset + 4, :] = 20
        else:
            texture[:, offset:offset + 4] = 20
    return np.repeat(texture[:, :, np.newaxis], 3, axis=2).astype(np.uint8)


def synthetic_samples(per_class: int, side: int = TINY_SIDE, seed: int = 0) -> tuple[list, list]:
    rng = np.random.default_rng(seed)
    positives = [
        PatchSample(pixels=synthetic_patch(rng, True, side), label=Label.POSITIVE, source_frame_id=f"crack{i:04d}")
        for i in range(per_class)
    ]
    negatives = [
        PatchSample(pixels=synthetic_patch(rng, False, side), label=Label.NEGATIVE, source_frame_id=f"plain{i:04d}")
        for i in range(per_class)
    ]
    return positives, negatives


def synthetic_manifest(
    directory: Path, per_class: int, *, side: int = TINY_SIDE, seed: int = 0
) -> DatasetManifest:
    """Write ``per_class`` patches of each class under ``directory`` and split them 80/10/10."""
    positives, negatives = synthetic_samples(per_class, side, seed)
    write_patches(positives, directory / "pos")
    write_patches(negatives, directory / "neg")
    manifest = build_manifest(
        collect_patches(directory / "pos", Label.POSITIVE),
        collect_patches(directory / "neg", Label.NEGATIVE),
        (0.8, 0.1, 0.1),
        seed,
    )
    manifest.root = directory
    return manifest


def synthetic_frame(width: int = 2440, height: int = 1080, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)


class ConstantModel:
    """Predicts the same crack probability for every patch."""

    def __init__(self, probability: float) -> None:
        self.probability = probability
        self.calls = 0

    def predict_pixels(self, pixels: np.ndarray) -> np.ndarray:
        self.calls += 1
        return np.full(len(pixels), self.probability, dtype=np.float32)


class MeanBrightnessModel:
    """Probability is one minus the mean intensity of the patch."""

    def predict_pixels(self, pixels: np.ndarray) -> np.ndarray:
        return 1.0 - np.asarray(pixels, dtype=np.float64).reshape(len(pixels), -1).mean(axis=1) / 255.0


def toy_history(val_accuracy, *, start=None, seed=0, backbone="VGG16", config=None) -> RunHistory:
    """History whose losses mirror its accuracies; ``start`` defaults to a single-phase run."""
    epochs = len(val_accuracy)
    start = epochs if start is None else start
    if config is None:
        config = TrainConfig(total_epochs=epochs, finetune_start_epoch=start, replicates=1, seeds=(seed,))
    records = [
        EpochRecord(
            epoch=epoch,
            phase=config.phase_of(epoch),
            train_loss=1.0 - accuracy,
            val_loss=1.0 - accuracy,
            train_accuracy=accuracy,
            val_accuracy=accuracy,
            trainable_parameter_count=10 if epoch < start else 20,
            learning_rate=config.learning_rate_for(config.phase_of(epoch)),
        )
        for epoch, accuracy in enumerate(val_accuracy)
    ]
    return RunHistory(records=records, config=config, seed=seed, backbone=backbone)


def persist_experiment(directory: Path, backbone: str, config: TrainConfig, runs) -> ExperimentRecord:
    """Write ``(seed, val_accuracies, confusion_counts)`` runs the way the trainer lays them out."""
    record = ExperimentRecord(backbone=backbone, config=config)
    for seed, accuracies, counts in runs:
        history = toy_history(accuracies, start=config.finetune_start_epoch, seed=seed, backbone=backbone, config=config)
        history.to_csv(directory / history_filename(seed))
        (directory / evaluation_filename(seed)).write_text(json.dumps({"confusion": counts}), encoding="utf-8")
        record.histories.append(history)
    record.save(directory)
    return record
