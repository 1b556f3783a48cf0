from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path

from pavecrack.dataset import read_manifest
from pavecrack.evaluation import DEFAULT_THRESHOLD, error_balance, evaluate_samples, metrics_from_confusion
from pavecrack.exceptions import PersistenceError
from pavecrack.models import SPLITS, Split
from pavecrack.zoo import load_checkpoint

from ._base import PavecrackCommand

logger = logging.getLogger(__name__)


class Command(PavecrackCommand):
    help = "Evaluate a checkpoint on one manifest split and write confusion counts and metrics."

    def add_arguments(self, parser):
        parser.add_argument("--checkpoint", required=True, type=Path)
        parser.add_argument("--manifest", required=True, type=Path)
        parser.add_argument("--split", default=Split.TEST, choices=SPLITS)
        parser.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
        parser.add_argument("--out", required=True, type=Path, help="Output directory")

    def handle(self, *args, **options):
        model = load_checkpoint(options["checkpoint"])
        manifest = read_manifest(options["manifest"])
        cm = evaluate_samples(model, manifest.references(options["split"]), options["threshold"])
        metrics = metrics_from_confusion(cm)
        balance = error_balance(cm)
        payload = {
            "checkpoint": str(options["checkpoint"]),
            "split": options["split"],
            "threshold": options["threshold"],
            "confusion": cm.to_dict(),
            "metrics": asdict(metrics),
            "false_negative_ratio": balance.false_negative_ratio,
            "predicted_negative_fraction": balance.predicted_negative_fraction,
        }
        path = options["out"] / "evaluation.json"
        try:
            options["out"].mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        except OSError as exc:
            raise PersistenceError(f"Cannot write {path}: {exc}") from exc
        logger.info("evaluation written path=%s accuracy=%.4f recall=%s", path, metrics.accuracy, metrics.recall)
