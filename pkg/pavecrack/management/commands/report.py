from __future__ import annotations

import logging
from pathlib import Path

from django.core.management.base import CommandError

from pavecrack.evaluation import select_best
from pavecrack.reporting import (
    emit_tables,
    load_experiments,
    render_plots,
    render_test_accuracy_chart,
    write_curves_csv,
)

from ._base import PavecrackCommand

logger = logging.getLogger(__name__)


class Command(PavecrackCommand):
    help = "Build the performance tables and training curves from trained experiments."

    def add_arguments(self, parser):
        parser.add_argument("--experiments", required=True, type=Path, help="Directory passed to train --out-dir")
        parser.add_argument("--out", required=True, type=Path)
        parser.add_argument("--plots", action="store_true", help="Also render accuracy and loss figures")

    def handle(self, *args, **options):
        out: Path = options["out"]
        experiments = load_experiments(options["experiments"])
        for experiment in experiments:
            if experiment.band is None:
                continue
            prefix = f"{experiment.record.backbone}_{experiment.record.config.variant}_"
            write_curves_csv(experiment.band, out / f"{prefix}curves.csv")
            if options["plots"]:
                render_plots(experiment.band, out, prefix=prefix)

        summaries = [experiment.summary for experiment in experiments if experiment.summary is not None]
        if not summaries:
            raise CommandError("No experiment has test evaluations to tabulate.")
        emit_tables(summaries, out)
        if options["plots"]:
            render_test_accuracy_chart(summaries, out / "test_accuracy.png")
        best = select_best(summaries)
        logger.info(
            "best variant backbone=%s variant=%s accuracy=%.4f fn=%d",
            best.backbone, best.variant, best.stats.mean("accuracy"), best.confusion.fn,
        )
