from __future__ import annotations

from pathlib import Path

from django.core.management.base import CommandError

from pavecrack.dataset import read_manifest
from pavecrack.forms import build_train_config, read_config_file
from pavecrack.trainer import run_replicates
from pavecrack.zoo import BACKBONE_NAMES, get_backbone

from ._base import PavecrackCommand

# Flags that override config-file keys of the same name.
OVERRIDES = (
    ("--total-epochs", "total_epochs", int),
    ("--finetune-start-epoch", "finetune_start_epoch", int),
    ("--batch-size", "batch_size", int),
    ("--phase1-learning-rate", "phase1_learning_rate", float),
    ("--phase2-learning-rate", "phase2_learning_rate", float),
    ("--replicates", "replicates", int),
    ("--seeds", "seeds", str),
    ("--unfreeze-fraction", "unfreeze_fraction", float),
    ("--threshold", "threshold", float),
)


class Command(PavecrackCommand):
    help = "Run the two-phase transfer-learning protocol for one backbone, once per seed."

    def add_arguments(self, parser):
        parser.add_argument("--backbone", required=True, choices=BACKBONE_NAMES)
        parser.add_argument("--manifest", required=True, type=Path)
        parser.add_argument("--config", type=Path, help="Experiment config file (key = value lines)")
        parser.add_argument("--out-dir", required=True, type=Path)
        parser.add_argument(
            "--augmented", action="store_const", const=True, default=None,
            help="The manifest's training split is expanded",
        )
        parser.add_argument("--keep-best-val", action="store_const", const=True, default=None)
        for flag, _, kind in OVERRIDES:
            parser.add_argument(flag, type=kind, default=None)

    def handle(self, *args, **options):
        file_values = read_config_file(options["config"]) if options["config"] else {}
        overrides = {key: options[key] for _, key, _ in OVERRIDES}
        overrides["augmented"] = options["augmented"]
        overrides["keep_best_val"] = options["keep_best_val"]
        config = build_train_config(file_values, overrides)

        record = run_replicates(
            get_backbone(options["backbone"]),
            read_manifest(options["manifest"]),
            config,
            out_dir=options["out_dir"],
        )
        if record.status == "failed":
            raise CommandError(f"Every replicate of {options['backbone']} failed; see experiment.json.")
