import io
import json
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path
from unittest import mock

from django.test import SimpleTestCase
from PIL import Image

from pavecrack.cli import SUBCOMMANDS, dispatch
from pavecrack.dataset import read_manifest, write_manifest, write_patches
from pavecrack.models import (
    DatasetManifest,
    ExperimentRecord,
    Label,
    ManifestEntry,
    Split,
    TrainConfig,
    evaluation_filename,
)

from .helpers import (
    ConstantModel,
    TinyProvider,
    persist_experiment,
    synthetic_frame,
    synthetic_manifest,
    synthetic_samples,
    tiny_spec,
)


def run(*argv):
    stdout, stderr = io.StringIO(), io.StringIO()
    with redirect_stdout(stdout), redirect_stderr(stderr):
        code = dispatch(list(argv))
    return code, stdout.getvalue(), stderr.getvalue()


class DispatchTests(SimpleTestCase):
    def test_help_lists_every_subcommand(self):
        code, out, _ = run("--help")
        self.assertEqual(code, 0)
        for name in SUBCOMMANDS:
            self.assertIn(name, out)

    def test_unknown_or_missing_subcommand(self):
        code, _, err = run("frobnicate")
        self.assertEqual(code, 2)
        self.assertIn("unknown subcommand 'frobnicate'", err)
        self.assertEqual(run()[0], 2)

    def test_subcommand_help_and_usage_errors(self):
        code, out, _ = run("validate", "--help")
        self.assertEqual(code, 0)
        self.assertIn("--manifest", out)
        self.assertEqual(run("validate")[0], 2)
        self.assertEqual(run("train", "--backbone", "AlexNet", "--manifest", "m.tsv", "--out-dir", "x")[0], 2)

    def test_toolkit_errors_exit_with_one(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, _, err = run("build-dataset", "--out", str(Path(tmp) / "m.tsv"), "--pos", tmp)
            self.assertEqual(code, 1)
            self.assertIn("--pos and --neg", err)
            (Path(tmp) / "bogus.tsv").write_text("not a manifest\n", encoding="utf-8")
            self.assertEqual(run("validate", "--manifest", str(Path(tmp) / "bogus.tsv"))[0], 1)


class DatasetCommandTests(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)

    def test_build_validate_and_augment(self):
        positives, negatives = synthetic_samples(10, side=8)
        write_patches(positives, self.tmp / "pos")
        write_patches(negatives, self.tmp / "neg")
        manifest_path = self.tmp / "data" / "manifest.tsv"
        code, _, err = run(
            "build-dataset", "--out", str(manifest_path),
            "--pos", str(self.tmp / "pos"), "--neg", str(self.tmp / "neg"), "--seed", "3",
        )
        self.assertEqual(code, 0, err)
        manifest = read_manifest(manifest_path)
        self.assertEqual(manifest.split_counts, {"train": 16, "val": 2, "test": 2})

        code, out, _ = run("validate", "--manifest", str(manifest_path))
        self.assertEqual(code, 0)
        self.assertTrue(out.startswith("status: pass"))

        expanded_path = self.tmp / "data" / "manifest_aug.tsv"
        code, _, err = run(
            "augment", "--manifest", str(manifest_path), "--out", str(expanded_path), "--transforms", "hflip,rot90"
        )
        self.assertEqual(code, 0, err)
        self.assertEqual(read_manifest(expanded_path).split_counts["train"], 48)

    def test_frames_are_tiled_beside_the_manifest(self):
        (self.tmp / "frames").mkdir()
        Image.fromarray(synthetic_frame(seed=4)).save(self.tmp / "frames" / "survey_0001.png")
        code, _, err = run("build-dataset", "--out", str(self.tmp / "manifest.tsv"), "--frames", str(self.tmp / "frames"))
        self.assertEqual(code, 0, err)
        self.assertEqual(len(list((self.tmp / "unlabeled").glob("*.png"))), 12)

    def test_failed_validation_prints_the_report(self):
        entries = [
            ManifestEntry("a.png", Label.POSITIVE, Split.TRAIN, "a"),
            ManifestEntry("a.png", Label.POSITIVE, Split.TEST, "a"),
        ]
        path = write_manifest(DatasetManifest(entries=entries), self.tmp / "leaky.tsv")
        code, out, _ = run("validate", "--manifest", str(path), "--skip-file-check")
        self.assertEqual(code, 1)
        self.assertTrue(out.startswith("status: fail"))
        self.assertIn("leakage", out)


class ModelCommandTests(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)

    def test_train_reads_the_config_file_and_flags(self):
        manifest = synthetic_manifest(self.tmp / "data", 10)
        manifest_path = write_manifest(manifest, self.tmp / "data" / "manifest.tsv")
        config_path = self.tmp / "tiny.conf"
        config_path.write_text(
            "# tiny protocol\ntotal_epochs = 4\nfinetune_start_epoch = 2\nbatch_size = 8\n"
            "phase1_learning_rate = 0.01\nphase2_learning_rate = 0.001\nreplicates = 1\nseeds = 0\n",
            encoding="utf-8",
        )
        with mock.patch("pavecrack.zoo.default_provider", return_value=TinyProvider()), \
                mock.patch("pavecrack.management.commands.train.get_backbone", return_value=tiny_spec()):
            code, _, err = run(
                "train", "--backbone", "MobileNetV2", "--manifest", str(manifest_path),
                "--config", str(config_path), "--total-epochs", "3", "--out-dir", str(self.tmp / "runs"),
            )
        self.assertEqual(code, 0, err)
        directory = self.tmp / "runs" / "MobileNetV2_noaug"
        record = ExperimentRecord.load(directory)
        self.assertEqual(record.status, "complete")
        self.assertEqual((record.config.total_epochs, record.config.finetune_start_epoch), (3, 2))
        self.assertEqual(record.config.batch_size, 8)
        [history] = record.histories
        self.assertEqual([r.epoch for r in history.records], [0, 1, 2])
        self.assertTrue((directory / evaluation_filename(0)).is_file())

    def test_evaluate_writes_metrics(self):
        positives, negatives = synthetic_samples(10, side=8)
        write_patches(positives, self.tmp / "pos")
        write_patches(negatives, self.tmp / "neg")
        manifest_path = self.tmp / "manifest.tsv"
        self.assertEqual(
            run("build-dataset", "--out", str(manifest_path), "--pos", str(self.tmp / "pos"),
                "--neg", str(self.tmp / "neg"))[0],
            0,
        )
        with mock.patch("pavecrack.management.commands.evaluate.load_checkpoint", return_value=ConstantModel(0.9)):
            code, _, err = run(
                "evaluate", "--checkpoint", "model.weights.h5", "--manifest", str(manifest_path),
                "--out", str(self.tmp / "eval"),
            )
        self.assertEqual(code, 0, err)
        payload = json.loads((self.tmp / "eval" / "evaluation.json").read_text(encoding="utf-8"))
        self.assertEqual(payload["confusion"], {"tp": 1, "fp": 1, "tn": 0, "fn": 0})
        self.assertEqual(payload["metrics"]["accuracy"], 0.5)
        self.assertEqual(payload["split"], "test")

    def test_infer_writes_overlays_and_detections(self):
        (self.tmp / "frames").mkdir()
        for index in range(2):
            Image.fromarray(synthetic_frame(seed=index)).save(self.tmp / "frames" / f"survey_{index:04d}.png")
        with mock.patch("pavecrack.management.commands.infer.load_checkpoint", return_value=ConstantModel(0.6)):
            code, _, err = run(
                "infer", "--checkpoint", "model.weights.h5", "--frames", str(self.tmp / "frames"),
                "--out", str(self.tmp / "out"),
            )
        self.assertEqual(code, 0, err)
        self.assertEqual(
            sorted(path.name for path in (self.tmp / "out").glob("*.png")),
            ["survey_0000_overlay.png", "survey_0001_overlay.png"],
        )
        lines = (self.tmp / "out" / "detections.ndjson").read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 24)

    def test_infer_grid_origin_and_stride(self):
        (self.tmp / "frames").mkdir()
        Image.fromarray(synthetic_frame(seed=1)).save(self.tmp / "frames" / "survey_0000.png")
        with mock.patch("pavecrack.management.commands.infer.load_checkpoint", return_value=ConstantModel(0.6)):
            code, _, err = run(
                "infer", "--checkpoint", "model.weights.h5", "--frames", str(self.tmp / "frames"),
                "--out", str(self.tmp / "out"), "--grid", "1x2", "--origin", "40,100", "--stride", "300,200",
            )
        self.assertEqual(code, 0, err)
        lines = (self.tmp / "out" / "detections.ndjson").read_text(encoding="utf-8").splitlines()
        self.assertEqual([(json.loads(line)["x"], json.loads(line)["y"]) for line in lines], [(40, 100), (340, 100)])

        code, _, err = run(
            "infer", "--checkpoint", "model.weights.h5", "--frames", str(self.tmp / "frames"),
            "--out", str(self.tmp / "out"), "--origin", "40",
        )
        self.assertEqual(code, 1)
        self.assertIn("--origin", err)

    def test_report_builds_tables_from_trained_runs(self):
        config = TrainConfig(total_epochs=3, finetune_start_epoch=2, replicates=2, seeds=(0, 1))
        runs = [
            (0, [0.8, 0.9, 0.95], {"tp": 9, "fp": 1, "tn": 9, "fn": 1}),
            (1, [0.7, 0.8, 0.9], {"tp": 8, "fp": 0, "tn": 10, "fn": 2}),
        ]
        persist_experiment(self.tmp / "runs" / "VGG16_noaug", "VGG16", config, runs)
        persist_experiment(self.tmp / "runs" / "ResNet_noaug", "ResNet", config, runs)
        code, _, err = run("report", "--experiments", str(self.tmp / "runs"), "--out", str(self.tmp / "report"), "--plots")
        self.assertEqual(code, 0, err)
        names = {path.name for path in (self.tmp / "report").iterdir()}
        for expected in ("performance.csv", "performance_pretty.csv", "confusion.csv", "tables.pdf", "test_accuracy.png",
                         "VGG16_noaug_curves.csv", "VGG16_noaug_accuracy.png", "ResNet_noaug_loss.png"):
            self.assertIn(expected, names)

    def test_report_without_experiments_fails(self):
        (self.tmp / "runs").mkdir()
        self.assertEqual(run("report", "--experiments", str(self.tmp / "runs"), "--out", str(self.tmp / "r"))[0], 1)
