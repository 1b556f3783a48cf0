"""
Evaluation of trained classifiers: confusion counts, derived metrics,
cross-replicate aggregates and fine-tune boost statistics.

Metrics are computed with exact rational arithmetic and only converted to
floats at the end, so ``accuracy == (tp + tn) / total`` holds exactly.
Precision with no predicted positives, and recall with no positive ground
truth, are reported as undefined (``None``), never coerced to zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import TYPE_CHECKING, Iterable, Protocol, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix

from .dataset import load_pixels
from .exceptions import DataError, ShapeError, UndefinedBoostError
from .models import Label, PatchSample, Phase

if TYPE_CHECKING:
    from .models import RunHistory

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
METRICS = ("precision", "recall", "accuracy", "f1")
UNDEFINED = "undefined"


class SupportsCrackProbability(Protocol):
    def predict_pixels(self, pixels: np.ndarray) -> np.ndarray:
        ...


# -----------------------------------------------------------------------------
# Prediction
# -----------------------------------------------------------------------------

def _batches(samples: Iterable[PatchSample], batch_size: int) -> Iterable[np.ndarray]:
    batch: list[np.ndarray] = []
    for sample in samples:
        batch.append(load_pixels(sample).pixels)
        if len(batch) == batch_size:
            yield np.stack(batch)
            batch = []
    if batch:
        yield np.stack(batch)


def predict_probabilities(
    model: SupportsCrackProbability, samples: Iterable[PatchSample], *, batch_size: int = 32
) -> np.ndarray:
    chunks = [np.asarray(model.predict_pixels(batch), dtype=np.float64) for batch in _batches(samples, batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float64)


def predict_batch(
    model: SupportsCrackProbability,
    samples: Iterable[PatchSample],
    threshold: float = DEFAULT_THRESHOLD,
    *,
    batch_size: int = 32,
) -> list[str]:
    """Label each sample positive iff its crack probability is >= ``threshold``."""
    probabilities = predict_probabilities(model, samples, batch_size=batch_size)
    return [Label.POSITIVE if p >= threshold else Label.NEGATIVE for p in probabilities]


# -----------------------------------------------------------------------------
# Confusion counts and metrics
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise DataError(f"Confusion counts must be non-negative, got {self}.")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def predicted_negative_fraction(self) -> float:
        return (self.tn + self.fn) / self.total if self.total else 0.0

    @classmethod
    def mean(cls, matrices: Sequence[ConfusionMatrix]) -> ConfusionMatrix:
        """Counts averaged across runs and rounded to integers."""
        if not matrices:
            raise DataError("Cannot average an empty list of confusion matrices.")
        count = len(matrices)
        return cls(
            *(
                int(round(sum(getattr(cm, name) for cm in matrices) / count))
                for name in ("tp", "fp", "tn", "fn")
            )
        )

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def confusion_counts(predicted: Sequence[str], truth: Sequence[str]) -> ConfusionMatrix:
    if len(predicted) != len(truth):
        raise ShapeError(f"{len(predicted)} predictions for {len(truth)} ground-truth labels.")
    unknown = sorted({str(actual) for actual in truth} - {Label.POSITIVE, Label.NEGATIVE})
    if unknown:
        raise DataError(f"Ground truth must be pos or neg, got {unknown}.")
    if not truth:
        return ConfusionMatrix(tp=0, fp=0, tn=0, fn=0)
    labels = [str(Label.NEGATIVE), str(Label.POSITIVE)]
    guesses = [labels[1] if guess == Label.POSITIVE else labels[0] for guess in predicted]
    tn, fp, fn, tp = confusion_matrix([str(actual) for actual in truth], guesses, labels=labels).ravel()
    return ConfusionMatrix(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))


@dataclass(frozen=True)
class MetricSet:
    precision: float | None
    recall: float | None
    accuracy: float
    f1: float

    def get(self, name: str) -> float | None:
        return getattr(self, name)


def metrics_from_confusion(cm: ConfusionMatrix) -> MetricSet:
    if cm.total == 0:
        raise DataError("No evaluated samples.")
    if cm.tp + cm.fp == 0 and cm.tp + cm.fn == 0:
        raise DataError("No predicted and no actual positives; precision and recall are both undefined.")
    precision = Fraction(cm.tp, cm.tp + cm.fp) if cm.tp + cm.fp else None
    recall = Fraction(cm.tp, cm.tp + cm.fn) if cm.tp + cm.fn else None
    accuracy = Fraction(cm.tp + cm.tn, cm.total)
    # Harmonic mean of precision and recall; 0 when both are 0.
    f1 = Fraction(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn)
    return MetricSet(
        precision=None if precision is None else float(precision),
        recall=None if recall is None else float(recall),
        accuracy=float(accuracy),
        f1=float(f1),
    )


def evaluate_samples(
    model: SupportsCrackProbability,
    samples: Sequence[PatchSample],
    threshold: float = DEFAULT_THRESHOLD,
    *,
    batch_size: int = 32,
) -> ConfusionMatrix:
    predicted = predict_batch(model, samples, threshold, batch_size=batch_size)
    cm = confusion_counts(predicted, [sample.label for sample in samples])
    logger.info("samples evaluated n=%d tp=%d fp=%d tn=%d fn=%d", cm.total, cm.tp, cm.fp, cm.tn, cm.fn)
    return cm


@dataclass(frozen=True)
class ErrorBalance:
    false_negative_ratio: float | None
    predicted_negative_fraction: float


def error_balance(cm: ConfusionMatrix) -> ErrorBalance:
    """False negatives per false positive (``None`` when there are no false positives)."""
    ratio = cm.fn / cm.fp if cm.fp else None
    return ErrorBalance(false_negative_ratio=ratio, predicted_negative_fraction=cm.predicted_negative_fraction)


# -----------------------------------------------------------------------------
# Aggregation across replicates
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricSummary:
    mean: float | None
    sd: float | None
    n: int


@dataclass(frozen=True)
class AggregateStats:
    metrics: dict[str, MetricSummary]
    runs: int
    single_run: bool = False
    boost: tuple[float, float] | None = None

    def mean(self, name: str) -> float | None:
        return self.metrics[name].mean

    def sd(self, name: str) -> float | None:
        return self.metrics[name].sd


def aggregate_runs(
    per_run_metrics: Sequence[MetricSet],
    boosts: Sequence[tuple[float, float]] | None = None,
) -> AggregateStats:
    """Mean and sample SD (n-1) of each metric over the runs' own values."""
    if not per_run_metrics:
        raise DataError("Cannot aggregate zero runs.")
    summaries = {}
    for name in METRICS:
        values = [run.get(name) for run in per_run_metrics if run.get(name) is not None]
        if not values:
            summaries[name] = MetricSummary(mean=None, sd=None, n=0)
            continue
        sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        summaries[name] = MetricSummary(mean=float(np.mean(values)), sd=sd, n=len(values))
    single_run = len(per_run_metrics) == 1
    if single_run:
        logger.warning("single run aggregated; standard deviations reported as 0")
    boost = None
    if boosts:
        accuracy_boosts, loss_reductions = zip(*boosts)
        boost = (float(np.mean(accuracy_boosts)), float(np.mean(loss_reductions)))
    return AggregateStats(metrics=summaries, runs=len(per_run_metrics), single_run=single_run, boost=boost)


def finetune_boost(history: RunHistory) -> tuple[float, float]:
    """Validation accuracy gain and loss drop from the last head-only epoch to the final epoch."""
    start = history.finetune_start
    if start is None or start == 0 or not history.records:
        raise UndefinedBoostError("The history does not contain both training phases.")
    before = next((record for record in history.records if record.epoch == start - 1), None)
    if before is None or before.phase != Phase.HEAD_ONLY:
        raise UndefinedBoostError(f"Epoch {start - 1} is not a head-only epoch.")
    final = history.records[-1]
    return final.val_accuracy - before.val_accuracy, before.val_loss - final.val_loss


# -----------------------------------------------------------------------------
# Variant comparison
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class VariantSummary:
    """One (backbone, variant) row of the report tables."""

    backbone: str
    variant: str
    stats: AggregateStats
    confusion: ConfusionMatrix

    @property
    def key(self) -> tuple[str, str]:
        return self.backbone, self.variant


def select_best(summaries: Sequence[VariantSummary], tolerance: float = 0.001) -> VariantSummary:
    """Highest mean accuracy; near-ties are settled by fewer false negatives."""
    if not summaries:
        raise DataError("No variants to compare.")
    scored = [summary for summary in summaries if summary.stats.mean("accuracy") is not None]
    if not scored:
        raise DataError("No variant has a defined accuracy.")
    top = max(summary.stats.mean("accuracy") for summary in scored)
    contenders = [summary for summary in scored if top - summary.stats.mean("accuracy") <= tolerance]
    return min(contenders, key=lambda summary: (summary.confusion.fn, -summary.stats.mean("accuracy")))
