"""
Two-phase transfer-learning protocol.

Phase 1 trains only the classification head on top of a frozen backbone.
Phase 2 unfreezes the topmost fraction of the backbone's weight-bearing
units and continues at a lower learning rate. Every replicate of an
experiment runs the same protocol and differs only by its seed, which
drives the head initialization and the per-epoch shuffling order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import tensorflow as tf
from tensorflow import keras

from .dataset import load_pixels
from .evaluation import evaluate_samples, metrics_from_confusion
from .exceptions import DataError, DivergenceError, PavecrackError, PersistenceError
from .models import (
    DatasetManifest,
    EpochRecord,
    ExperimentRecord,
    Label,
    PatchSample,
    Phase,
    RunHistory,
    Split,
    TrainConfig,
    evaluation_filename,
    experiment_dirname,
    history_filename,
)
from .zoo import BackboneProvider, BackboneSpec, ClassifierModel, instantiate, save_checkpoint, unfreeze_top

logger = logging.getLogger(__name__)

ACCURACY_THRESHOLD = 0.5

EpochCallback = Callable[[EpochRecord, ClassifierModel], None]


# -----------------------------------------------------------------------------
# Batching
# -----------------------------------------------------------------------------

def _load_batch(model: ClassifierModel, samples: Sequence[PatchSample]) -> tuple[np.ndarray, np.ndarray]:
    pixels = np.stack([load_pixels(sample).pixels for sample in samples])
    targets = np.array([[1.0 if sample.label == Label.POSITIVE else 0.0] for sample in samples], dtype=np.float32)
    return model.preprocess_pixels(pixels), targets


def _optimizer_for(model: ClassifierModel, learning_rate: float) -> keras.optimizers.Optimizer:
    """Reuse the model's optimizer while the learning rate and trainable set are unchanged."""
    variables = model.network.trainable_variables
    key = (float(learning_rate), tuple(id(variable) for variable in variables))
    if model.optimizer is None or model.optimizer_key != key:
        optimizer = keras.optimizers.Adam(learning_rate=learning_rate)
        optimizer.build(variables)
        model.optimizer, model.optimizer_key = optimizer, key
    return model.optimizer


def _make_train_step(model: ClassifierModel, optimizer: keras.optimizers.Optimizer, loss_fn):
    network = model.network
    variables = network.trainable_variables

    @tf.function(reduce_retracing=True)
    def step(inputs, targets):
        with tf.GradientTape() as tape:
            # Normalization layers run on their pretrained statistics in both phases.
            probabilities = network(inputs, training=False)
            loss = loss_fn(targets, probabilities)
        gradients = tape.gradient(loss, variables)
        optimizer.apply_gradients(zip(gradients, variables))
        return loss, probabilities

    return step


def _evaluate_stream(
    model: ClassifierModel, samples: Sequence[PatchSample], batch_size: int, loss_fn
) -> tuple[float, float]:
    """Mean loss and accuracy over the whole stream with the model in evaluation mode."""
    loss_sum = 0.0
    correct = 0
    for start in range(0, len(samples), batch_size):
        inputs, targets = _load_batch(model, samples[start:start + batch_size])
        probabilities = model.network(inputs, training=False)
        loss_sum += float(loss_fn(targets, probabilities)) * len(targets)
        predicted = np.asarray(probabilities) >= ACCURACY_THRESHOLD
        correct += int(np.sum(predicted == (targets >= 0.5)))
    return loss_sum / len(samples), correct / len(samples)


# -----------------------------------------------------------------------------
# Training
# -----------------------------------------------------------------------------

def train_phase(
    model: ClassifierModel,
    train_stream: Sequence[PatchSample],
    val_stream: Sequence[PatchSample],
    epochs: int,
    learning_rate: float,
    start_epoch: int,
    *,
    batch_size: int = 32,
    seed: int = 0,
    phase: str = Phase.HEAD_ONLY,
    on_epoch_end: EpochCallback | None = None,
) -> list[EpochRecord]:
    """Train ``model`` in place for ``epochs`` epochs with its current trainability.

    The training order of epoch ``e`` depends only on ``(seed, e)``, so a
    run split into several calls visits the samples exactly like one call
    of the same total length.
    """
    if epochs == 0:
        return []
    train_stream = list(train_stream)
    val_stream = list(val_stream)
    if not train_stream:
        raise DataError("The training stream is empty.")
    if not val_stream:
        raise DataError("The validation stream is empty.")

    loss_fn = keras.losses.BinaryCrossentropy()
    optimizer = _optimizer_for(model, learning_rate)
    step = _make_train_step(model, optimizer, loss_fn)
    trainable = model.trainable_parameter_count

    records = []
    for epoch in range(start_epoch, start_epoch + epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(train_stream))
        loss_sum = 0.0
        correct = 0
        for start in range(0, len(order), batch_size):
            batch = [train_stream[i] for i in order[start:start + batch_size]]
            inputs, targets = _load_batch(model, batch)
            loss, probabilities = step(tf.constant(inputs), tf.constant(targets))
            loss = float(loss)
            if not np.isfinite(loss):
                raise DivergenceError(f"Non-finite training loss at epoch {epoch}.", epoch=epoch)
            loss_sum += loss * len(batch)
            correct += int(np.sum((np.asarray(probabilities) >= ACCURACY_THRESHOLD) == (targets >= 0.5)))

        val_loss, val_accuracy = _evaluate_stream(model, val_stream, batch_size, loss_fn)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"Non-finite validation loss at epoch {epoch}.", epoch=epoch)
        record = EpochRecord(
            epoch=epoch,
            phase=phase,
            train_loss=loss_sum / len(train_stream),
            val_loss=val_loss,
            train_accuracy=correct / len(train_stream),
            val_accuracy=val_accuracy,
            trainable_parameter_count=trainable,
            learning_rate=float(learning_rate),
        )
        records.append(record)
        logger.info(
            "epoch finished epoch=%d phase=%s train_loss=%.4f train_acc=%.4f val_loss=%.4f val_acc=%.4f",
            epoch, phase, record.train_loss, record.train_accuracy, val_loss, val_accuracy,
        )
        if on_epoch_end is not None:
            on_epoch_end(record, model)
    return records


def checkpoint_stem(directory: Path, backbone: str, config: TrainConfig, seed: int, epoch: int) -> Path:
    return directory / f"{backbone}_{config.variant}_seed{seed}_epoch{epoch}"


def _check_manifest(manifest: DatasetManifest, config: TrainConfig) -> None:
    augmented = manifest.has_augmented(Split.TRAIN)
    if config.augmented and not augmented:
        raise DataError("The configuration asks for augmentation but the training split is not expanded.")
    if augmented and not config.augmented:
        raise DataError("The training split is expanded but the configuration is not augmented.")


def _write_evaluation(
    model: ClassifierModel, manifest: DatasetManifest, config: TrainConfig, seed: int, out_dir: Path, checkpoint: Path
) -> None:
    test = manifest.references(Split.TEST)
    if not test:
        return
    cm = evaluate_samples(model, test, config.threshold, batch_size=config.batch_size)
    payload = {"seed": seed, "checkpoint": str(checkpoint), "threshold": config.threshold, "confusion": cm.to_dict()}
    try:
        payload["metrics"] = asdict(metrics_from_confusion(cm))
    except DataError as exc:
        logger.warning("test metrics undefined seed=%d reason=%s", seed, exc)
    path = out_dir / evaluation_filename(seed)
    try:
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    except OSError as exc:
        raise PersistenceError(f"Cannot write {path}: {exc}") from exc


def run_experiment(
    backbone: BackboneSpec,
    manifest: DatasetManifest,
    config: TrainConfig,
    seed: int,
    *,
    out_dir: Path,
    provider: BackboneProvider | None = None,
) -> RunHistory:
    """Run one replicate of the two-phase protocol and persist its artifacts in ``out_dir``."""
    _check_manifest(manifest, config)
    if config.deterministic:
        tf.config.experimental.enable_op_determinism()
    keras.utils.set_random_seed(seed)

    out_dir = Path(out_dir)
    checkpoints = out_dir / "checkpoints"
    train = manifest.references(Split.TRAIN)
    val = manifest.references(Split.VAL)
    model = instantiate(backbone, head_seed=seed, provider=provider)
    start, total = config.finetune_start_epoch, config.total_epochs
    logger.info(
        "run started backbone=%s variant=%s seed=%d train=%d val=%d",
        backbone.name, config.variant, seed, len(train), len(val),
    )

    on_epoch_end = None
    if config.keep_best_val:
        best = {"val_accuracy": -1.0}

        def on_epoch_end(record: EpochRecord, current: ClassifierModel) -> None:
            if record.val_accuracy > best["val_accuracy"]:
                best["val_accuracy"] = record.val_accuracy
                save_checkpoint(current, checkpoints / f"{backbone.name}_{config.variant}_seed{seed}_best")

    records = train_phase(
        model, train, val, start, config.phase1_learning_rate, 0,
        batch_size=config.batch_size, seed=seed, phase=Phase.HEAD_ONLY, on_epoch_end=on_epoch_end,
    )
    if 0 < start < total:
        save_checkpoint(model, checkpoint_stem(checkpoints, backbone.name, config, seed, start))
    if start < total:
        unfreeze_top(model, config.unfreeze_fraction)
        records += train_phase(
            model, train, val, total - start, config.phase2_learning_rate, start,
            batch_size=config.batch_size, seed=seed, phase=Phase.FINE_TUNE, on_epoch_end=on_epoch_end,
        )

    final = save_checkpoint(model, checkpoint_stem(checkpoints, backbone.name, config, seed, total))
    history = RunHistory(records=records, config=config, seed=seed, backbone=backbone.name, final_checkpoint=str(final))
    history.to_csv(out_dir / history_filename(seed))
    if config.evaluate_test:
        _write_evaluation(model, manifest, config, seed, out_dir, final)
    logger.info("run finished backbone=%s variant=%s seed=%d epochs=%d", backbone.name, config.variant, seed, len(records))
    return history


def run_replicates(
    backbone: BackboneSpec,
    manifest: DatasetManifest,
    config: TrainConfig,
    *,
    out_dir: Path,
    provider: BackboneProvider | None = None,
) -> ExperimentRecord:
    """Run one replicate per seed under ``{out_dir}/{backbone}_{variant}/``.

    A failing replicate is recorded and the remaining ones still run.
    """
    directory = Path(out_dir) / experiment_dirname(backbone.name, config)
    record = ExperimentRecord(backbone=backbone.name, config=config)
    for seed in config.seeds:
        keras.backend.clear_session()
        try:
            record.histories.append(
                run_experiment(backbone, manifest, config, seed, out_dir=directory, provider=provider)
            )
        except PavecrackError as exc:
            record.failures[seed] = str(exc)
            logger.error("replicate failed backbone=%s seed=%d error=%s", backbone.name, seed, exc)
        except Exception as exc:  # noqa: BLE001
            record.failures[seed] = f"{type(exc).__name__}: {exc}"
            logger.exception("replicate crashed backbone=%s seed=%d", backbone.name, seed)
    record.save(directory)
    logger.info(
        "experiment finished backbone=%s variant=%s status=%s runs=%d",
        backbone.name, config.variant, record.status, len(record.histories),
    )
    return record
