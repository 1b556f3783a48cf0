"""
Tables and training-curve figures built from persisted experiments.

Curves show the per-epoch mean across replicates with the min/max range
shaded around it. Tables come in three forms: a full-precision CSV that
parses back to the exact inputs, a 4-decimal display CSV, and a one-page
PDF of both tables.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from reportlab.lib.pagesizes import landscape, letter  # noqa: E402
from reportlab.lib.units import inch  # noqa: E402
from reportlab.pdfgen import canvas  # noqa: E402

from .evaluation import (  # noqa: E402
    UNDEFINED,
    ConfusionMatrix,
    VariantSummary,
    aggregate_runs,
    finetune_boost,
    metrics_from_confusion,
)
from .exceptions import DataError, PersistenceError, ShapeError, UndefinedBoostError, UniquenessError  # noqa: E402
from .models import SERIES, ExperimentRecord, RunHistory, evaluation_filename  # noqa: E402
from .zoo import BACKBONE_NAMES  # noqa: E402

logger = logging.getLogger(__name__)

VARIANTS = ("noaug", "aug")
VARIANT_LABELS = {"noaug": "Non-Aug", "aug": "Aug"}
UNDEFINABLE_METRICS = ("precision", "recall")

# Performance rows: (label, metric, statistic).
PERFORMANCE_ROWS = (
    ("Precision", "precision", "mean"),
    ("Recall (Mean)", "recall", "mean"),
    ("Accuracy (Mean)", "accuracy", "mean"),
    ("Accuracy (SD)", "accuracy", "sd"),
    ("F1-Score (Mean)", "f1", "mean"),
    ("F1-Score (SD)", "f1", "sd"),
    ("Finetune Accuracy Boost", "boost", "accuracy"),
    ("Finetune Loss Reduction", "boost", "loss"),
)

CONFUSION_ROWS = (
    ("True Positive", "tp"),
    ("False Positive", "fp"),
    ("True Negative", "tn"),
    ("False Negative", "fn"),
)


# -----------------------------------------------------------------------------
# Curves
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class CurveBand:
    """Per-epoch mean, min and max of each history series across replicates."""

    mean: dict[str, np.ndarray]
    low: dict[str, np.ndarray]
    high: dict[str, np.ndarray]
    total_epochs: int
    finetune_start: int | None = None
    runs: int = 1

    def __len__(self) -> int:
        return self.total_epochs


def build_curves(histories: Sequence[RunHistory]) -> CurveBand:
    if not histories:
        raise DataError("Cannot build curves from zero histories.")
    lengths = {len(history) for history in histories}
    if len(lengths) != 1:
        raise ShapeError(f"Histories have different lengths: {sorted(lengths)}.")
    starts = {history.finetune_start for history in histories}
    if len(starts) != 1:
        raise ShapeError(f"Histories switch phase at different epochs: {sorted(starts, key=str)}.")

    mean, low, high = {}, {}, {}
    for name in SERIES:
        # Sorted per epoch before averaging, so replicate order never changes the sum.
        stacked = np.sort(np.stack([history.series(name) for history in histories]), axis=0)
        mean[name] = np.clip(stacked.mean(axis=0), stacked[0], stacked[-1])
        low[name] = stacked[0]
        high[name] = stacked[-1]
    return CurveBand(
        mean=mean,
        low=low,
        high=high,
        total_epochs=lengths.pop(),
        finetune_start=starts.pop(),
        runs=len(histories),
    )


def write_curves_csv(band: CurveBand, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["epoch", "metric", "mean", "min", "max"])
            for name in SERIES:
                for epoch in range(band.total_epochs):
                    writer.writerow(
                        [epoch, name, repr(float(band.mean[name][epoch])),
                         repr(float(band.low[name][epoch])), repr(float(band.high[name][epoch]))]
                    )
    except OSError as exc:
        raise PersistenceError(f"Cannot write curves {path}: {exc}") from exc
    return path


def build_figure(band: CurveBand, kind: str, title: str = ""):
    """Accuracy or loss figure: train/val means with shaded min-max bands."""
    if kind not in ("accuracy", "loss"):
        raise ValueError(f"kind must be 'accuracy' or 'loss', got {kind!r}")
    epochs = np.arange(band.total_epochs)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for split, color in (("train", "tab:blue"), ("val", "tab:orange")):
        name = f"{split}_{kind}"
        ax.plot(epochs, band.mean[name], color=color, label=f"{split} {kind}")
        ax.fill_between(epochs, band.low[name], band.high[name], color=color, alpha=0.25, linewidth=0)
    if band.finetune_start is not None:
        ax.axvline(x=band.finetune_start, color="black", linestyle=":", alpha=0.6, label="fine-tune start")
    ax.set_xlim(0, band.total_epochs)
    ax.set_xlabel("Epoch")
    ax.set_ylabel(kind.capitalize())
    ax.set_title(title or f"{kind.capitalize()} vs Epoch")
    ax.legend(loc="best")
    fig.tight_layout()
    return fig


def render_plots(band: CurveBand, out: Path, *, prefix: str = "") -> list[Path]:
    out = Path(out)
    paths = []
    for kind in ("accuracy", "loss"):
        path = out / f"{prefix}{kind}.png"
        fig = build_figure(band, kind, title=f"{prefix.rstrip('_')} {kind} vs epoch".strip())
        try:
            out.mkdir(parents=True, exist_ok=True)
            fig.savefig(path, dpi=100, metadata={"Software": None})
        except OSError as exc:
            raise PersistenceError(f"Cannot write figure {path}: {exc}") from exc
        finally:
            plt.close(fig)
        paths.append(path)
    logger.info("figures rendered out=%s prefix=%s", out, prefix)
    return paths


def render_test_accuracy_chart(summaries: Sequence[VariantSummary], out: Path) -> Path:
    """Grouped bars of mean test accuracy per backbone, with and without augmentation."""
    backbones, variants = _columns(summaries)
    lookup = {summary.key: summary for summary in summaries}
    positions = np.arange(len(backbones))
    width = 0.8 / len(variants)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for index, variant in enumerate(variants):
        heights = [
            (lookup[(backbone, variant)].stats.mean("accuracy") or 0.0) if (backbone, variant) in lookup else 0.0
            for backbone in backbones
        ]
        ax.bar(positions + index * width, heights, width, label=VARIANT_LABELS.get(variant, variant))
    ax.set_xticks(positions + width * (len(variants) - 1) / 2, backbones)
    ax.set_ylim(0, 1)
    ax.set_ylabel("Test accuracy")
    ax.legend(loc="lower right")
    fig.tight_layout()
    path = Path(out)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=100, metadata={"Software": None})
    except OSError as exc:
        raise PersistenceError(f"Cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


# -----------------------------------------------------------------------------
# Tables
# -----------------------------------------------------------------------------

def _columns(summaries: Iterable[VariantSummary]) -> tuple[list[str], list[str]]:
    names = {summary.backbone for summary in summaries}
    variants_present = {summary.variant for summary in summaries}
    backbones = [name for name in BACKBONE_NAMES if name in names] + sorted(names - set(BACKBONE_NAMES))
    variants = [variant for variant in VARIANTS if variant in variants_present]
    variants += sorted(variants_present - set(VARIANTS))
    return backbones, variants


def _performance_value(summary: VariantSummary, metric: str, statistic: str) -> float | None:
    if metric == "boost":
        if summary.stats.boost is None:
            return None
        return summary.stats.boost[0 if statistic == "accuracy" else 1]
    return summary.stats.mean(metric) if statistic == "mean" else summary.stats.sd(metric)


def _performance_cell(summary: VariantSummary | None, metric: str, statistic: str, pretty: bool) -> str:
    if summary is None:
        return ""
    value = _performance_value(summary, metric, statistic)
    if value is None:
        return UNDEFINED if metric in UNDEFINABLE_METRICS else ""
    return f"{value:.4f}" if pretty else repr(float(value))


def _write_csv(path: Path, rows: list[list[str]]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            csv.writer(handle).writerows(rows)
    except OSError as exc:
        raise PersistenceError(f"Cannot write table {path}: {exc}") from exc
    return path


def _table_rows(summaries: Sequence[VariantSummary], *, kind: str, pretty: bool = False) -> list[list[str]]:
    backbones, variants = _columns(summaries)
    lookup = {summary.key: summary for summary in summaries}
    keys = [(backbone, variant) for backbone in backbones for variant in variants]
    rows = [
        ["Metric", *[backbone for backbone, _ in keys]],
        ["", *[VARIANT_LABELS.get(variant, variant) for _, variant in keys]],
    ]
    if kind == "performance":
        for label, metric, statistic in PERFORMANCE_ROWS:
            rows.append([label, *[_performance_cell(lookup.get(key), metric, statistic, pretty) for key in keys]])
    else:
        for label, name in CONFUSION_ROWS:
            rows.append([label, *[str(getattr(lookup[key].confusion, name)) if key in lookup else "" for key in keys]])
    return rows


def emit_tables(summaries: Sequence[VariantSummary], out_dir: Path) -> list[Path]:
    """Write ``performance.csv``, ``performance_pretty.csv``, ``confusion.csv`` and ``tables.pdf``."""
    if not summaries:
        raise DataError("No experiments to tabulate.")
    seen = set()
    for summary in summaries:
        if summary.key in seen:
            raise UniquenessError(f"Duplicate experiment {summary.backbone} {summary.variant}.")
        seen.add(summary.key)

    out_dir = Path(out_dir)
    performance = _table_rows(summaries, kind="performance")
    pretty = _table_rows(summaries, kind="performance", pretty=True)
    confusion = _table_rows(summaries, kind="confusion")
    paths = [
        _write_csv(out_dir / "performance.csv", performance),
        _write_csv(out_dir / "performance_pretty.csv", pretty),
        _write_csv(out_dir / "confusion.csv", confusion),
        _render_tables_pdf(out_dir / "tables.pdf", pretty, confusion),
    ]
    logger.info("tables emitted out=%s experiments=%d", out_dir, len(summaries))
    return paths


def _render_tables_pdf(path: Path, performance: list[list[str]], confusion: list[list[str]]) -> Path:
    width, height = landscape(letter)
    label_width = 1.6 * inch
    column_width = (width - 1.0 * inch - label_width) / max(1, len(performance[0]) - 1)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        pdf = canvas.Canvas(str(path), pagesize=landscape(letter), invariant=1)
        y = height - 0.75 * inch
        for title, rows in (("Model performance metrics", performance), ("Confusion matrix metrics", confusion)):
            pdf.setFont("Helvetica-Bold", 12)
            pdf.drawString(0.5 * inch, y, title)
            y -= 0.3 * inch
            for index, row in enumerate(rows):
                pdf.setFont("Helvetica-Bold" if index < 2 else "Helvetica", 7)
                pdf.drawString(0.5 * inch, y, row[0])
                for column, cell in enumerate(row[1:]):
                    pdf.drawString(0.5 * inch + label_width + column * column_width, y, cell)
                y -= 0.2 * inch
            y -= 0.3 * inch
        pdf.showPage()
        pdf.save()
    except OSError as exc:
        raise PersistenceError(f"Cannot write {path}: {exc}") from exc
    return path


def _read_table(path: Path) -> tuple[list[tuple[str, str]], list[list[str]]]:
    try:
        with Path(path).open(newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
    except OSError as exc:
        raise PersistenceError(f"Cannot read table {path}: {exc}") from exc
    labels = {label: variant for variant, label in VARIANT_LABELS.items()}
    keys = [(backbone, labels.get(variant, variant)) for backbone, variant in zip(rows[0][1:], rows[1][1:])]
    return keys, rows[2:]


def read_performance_table(path: Path) -> dict[tuple[str, str], dict[str, float | None]]:
    """Parse a full-precision performance CSV; empty cells are omitted, ``undefined`` becomes ``None``."""
    keys, rows = _read_table(path)
    table: dict[tuple[str, str], dict[str, float | None]] = {key: {} for key in keys}
    for row in rows:
        for key, cell in zip(keys, row[1:]):
            if cell == UNDEFINED:
                table[key][row[0]] = None
            elif cell:
                table[key][row[0]] = float(cell)
    return table


def read_confusion_table(path: Path) -> dict[tuple[str, str], ConfusionMatrix]:
    keys, rows = _read_table(path)
    by_label = {row[0]: row[1:] for row in rows}
    table = {}
    for index, key in enumerate(keys):
        cells = [by_label[label][index] for label, _ in CONFUSION_ROWS]
        if all(cells):
            table[key] = ConfusionMatrix(*(int(cell) for cell in cells))
    return table


# -----------------------------------------------------------------------------
# Loading experiments written by the trainer
# -----------------------------------------------------------------------------

@dataclass
class LoadedExperiment:
    record: ExperimentRecord
    band: CurveBand | None = None
    summary: VariantSummary | None = None
    confusions: list[ConfusionMatrix] = field(default_factory=list)


def _read_confusion(path: Path) -> ConfusionMatrix:
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise PersistenceError(f"Cannot read {path}: {exc}") from exc
    counts = payload["confusion"]
    return ConfusionMatrix(tp=counts["tp"], fp=counts["fp"], tn=counts["tn"], fn=counts["fn"])


def summarize(record: ExperimentRecord, directory: Path) -> LoadedExperiment:
    loaded = LoadedExperiment(record=record)
    if not record.histories:
        return loaded
    loaded.band = build_curves(record.histories)
    boosts = []
    for history in record.histories:
        try:
            boosts.append(finetune_boost(history))
        except UndefinedBoostError:
            pass
        path = directory / evaluation_filename(history.seed)
        if path.is_file():
            loaded.confusions.append(_read_confusion(path))
    if not loaded.confusions:
        logger.warning("no test evaluations found dir=%s", directory)
        return loaded
    stats = aggregate_runs([metrics_from_confusion(cm) for cm in loaded.confusions], boosts or None)
    loaded.summary = VariantSummary(
        backbone=record.backbone,
        variant=record.config.variant,
        stats=stats,
        confusion=ConfusionMatrix.mean(loaded.confusions),
    )
    return loaded


def load_experiments(directory: Path) -> list[LoadedExperiment]:
    """Read every ``*/experiment.json`` under ``directory``, in name order."""
    directory = Path(directory)
    experiments = []
    for path in sorted(directory.glob("*/experiment.json")):
        experiments.append(summarize(ExperimentRecord.load(path.parent), path.parent))
    if not experiments:
        raise DataError(f"No experiments found under {directory}.")
    logger.info("experiments loaded dir=%s count=%d", directory, len(experiments))
    return experiments
