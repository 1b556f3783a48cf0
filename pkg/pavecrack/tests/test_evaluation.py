import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings
from hypothesis import strategies as st

from pavecrack.evaluation import (
    ConfusionMatrix,
    MetricSet,
    VariantSummary,
    aggregate_runs,
    confusion_counts,
    error_balance,
    evaluate_samples,
    finetune_boost,
    metrics_from_confusion,
    predict_batch,
    select_best,
)
from pavecrack.exceptions import DataError, ShapeError, UndefinedBoostError
from pavecrack.models import EpochRecord, Label, PatchSample, Phase, RunHistory, TrainConfig

from .helpers import PUBLISHED, ConstantModel

counts = st.integers(0, 2000)


def _published_confusion(key):
    return ConfusionMatrix(**PUBLISHED["rows"][key]["confusion"])


def _samples(labels, side=2):
    return [
        PatchSample(pixels=np.zeros((side, side, 3), dtype=np.uint8), label=label, source_frame_id=f"f{i}")
        for i, label in enumerate(labels)
    ]


class SequenceModel:
    """Returns the given probabilities in order, one per patch."""

    def __init__(self, probabilities):
        self.probabilities = list(probabilities)
        self.position = 0

    def predict_pixels(self, pixels):
        chunk = self.probabilities[self.position:self.position + len(pixels)]
        self.position += len(pixels)
        return np.asarray(chunk, dtype=np.float64)


def _history(val_accuracies, val_losses, start):
    config = TrainConfig(
        total_epochs=len(val_accuracies),
        finetune_start_epoch=start,
        replicates=1,
        seeds=(0,),
    )
    records = [
        EpochRecord(
            epoch=epoch,
            phase=config.phase_of(epoch),
            train_loss=loss,
            val_loss=loss,
            train_accuracy=accuracy,
            val_accuracy=accuracy,
            trainable_parameter_count=10 if epoch < start else 20,
            learning_rate=config.learning_rate_for(config.phase_of(epoch)),
        )
        for epoch, (accuracy, loss) in enumerate(zip(val_accuracies, val_losses))
    ]
    return RunHistory(records=records, config=config, seed=0)


class MetricTests(SimpleTestCase):
    def test_all_negative_leaning_counts(self):
        metrics = metrics_from_confusion(ConfusionMatrix(tp=177, fp=0, tn=700, fn=523))
        self.assertEqual(metrics.precision, 1.0)
        self.assertAlmostEqual(metrics.recall, 0.2529, places=4)
        self.assertAlmostEqual(metrics.accuracy, 0.6264, places=4)

    def test_perfect_classifier(self):
        metrics = metrics_from_confusion(ConfusionMatrix(tp=700, fp=0, tn=700, fn=0))
        self.assertEqual((metrics.precision, metrics.recall, metrics.accuracy, metrics.f1), (1.0, 1.0, 1.0, 1.0))

    def test_strong_classifier(self):
        metrics = metrics_from_confusion(ConfusionMatrix(tp=685, fp=5, tn=695, fn=15))
        self.assertAlmostEqual(metrics.precision, 0.9928, places=4)
        self.assertAlmostEqual(metrics.recall, 0.9786, places=4)
        self.assertAlmostEqual(metrics.accuracy, 0.9857, places=4)
        self.assertAlmostEqual(metrics.f1, 1370 / 1390)

    def test_precision_is_undefined_without_predicted_positives(self):
        metrics = metrics_from_confusion(ConfusionMatrix(tp=0, fp=0, tn=700, fn=700))
        self.assertIsNone(metrics.precision)
        self.assertEqual(metrics.recall, 0.0)
        self.assertEqual(metrics.f1, 0.0)

    def test_recall_is_undefined_without_positive_ground_truth(self):
        metrics = metrics_from_confusion(ConfusionMatrix(tp=0, fp=3, tn=10, fn=0))
        self.assertEqual(metrics.precision, 0.0)
        self.assertIsNone(metrics.recall)
        self.assertEqual(metrics.accuracy, 10 / 13)
        self.assertEqual(metrics.f1, 0.0)

    def test_no_positives_anywhere_is_a_data_error(self):
        with self.assertRaises(DataError):
            metrics_from_confusion(ConfusionMatrix(tp=0, fp=0, tn=10, fn=0))
        with self.assertRaises(DataError):
            ConfusionMatrix(tp=-1, fp=0, tn=0, fn=0)

    @settings(max_examples=200, deadline=None)
    @given(tp=st.integers(1, 2000), fp=counts, tn=counts, fn=counts)
    def test_identities_hold_exactly(self, tp, fp, tn, fn):
        cm = ConfusionMatrix(tp=tp, fp=fp, tn=tn, fn=fn)
        metrics = metrics_from_confusion(cm)
        self.assertEqual(metrics.accuracy, (tp + tn) / (tp + fp + tn + fn))
        precision, recall = tp / (tp + fp), tp / (tp + fn)
        self.assertAlmostEqual(metrics.f1, 2 * precision * recall / (precision + recall), places=12)
        for value in (metrics.precision, metrics.recall, metrics.accuracy, metrics.f1):
            self.assertTrue(0.0 <= value <= 1.0)


class PublishedTableTests(SimpleTestCase):
    def test_counts_cover_the_whole_test_split(self):
        for key in PUBLISHED["rows"]:
            self.assertEqual(_published_confusion(key).total, PUBLISHED["test_size"], key)

    def test_accuracy_from_counts_matches_the_mean_accuracy(self):
        self.assertEqual(len(PUBLISHED["rows"]), 12)
        for key, row in PUBLISHED["rows"].items():
            accuracy = metrics_from_confusion(_published_confusion(key)).accuracy
            self.assertLessEqual(abs(accuracy - row["accuracy"]), 0.005, key)

    def test_published_f1_is_an_average_of_per_run_scores(self):
        pooled = metrics_from_confusion(_published_confusion("EfficientNetB7/noaug")).f1
        self.assertAlmostEqual(pooled, 0.4037, delta=0.0005)
        self.assertGreater(abs(pooled - PUBLISHED["rows"]["EfficientNetB7/noaug"]["f1"]), 0.001)

    def test_false_negatives_dominate_false_positives(self):
        for key in PUBLISHED["rows"]:
            cm = _published_confusion(key)
            if key.startswith("EfficientNetB7"):
                self.assertEqual(cm.fp, 0)
                self.assertIsNone(error_balance(cm).false_negative_ratio)
                self.assertGreater(error_balance(cm).predicted_negative_fraction, 0.85)
            else:
                self.assertGreater(cm.fn, cm.fp, key)
        doubled = [key for key in PUBLISHED["rows"] if _published_confusion(key).fn > 2 * _published_confusion(key).fp]
        self.assertEqual(len(doubled), 10)

    def test_best_variant_is_vgg_without_augmentation(self):
        summaries = []
        for key, row in PUBLISHED["rows"].items():
            backbone, variant = key.split("/")
            cm = _published_confusion(key)
            stats = aggregate_runs([MetricSet(row["precision"], row["recall"], row["accuracy"], row["f1"])])
            summaries.append(VariantSummary(backbone, variant, stats, cm))
        self.assertEqual(select_best(summaries).key, ("VGG16", "noaug"))


class PredictionTests(SimpleTestCase):
    def test_probability_at_the_threshold_is_positive(self):
        samples = _samples([Label.POSITIVE, Label.NEGATIVE])
        self.assertEqual(predict_batch(ConstantModel(0.5), samples), [Label.POSITIVE, Label.POSITIVE])
        self.assertEqual(predict_batch(ConstantModel(0.4999), samples), [Label.NEGATIVE, Label.NEGATIVE])

    def test_extreme_thresholds(self):
        samples = _samples([Label.POSITIVE] * 3)
        self.assertEqual(predict_batch(ConstantModel(0.0), samples, threshold=0.0), [Label.POSITIVE] * 3)
        self.assertEqual(predict_batch(ConstantModel(0.99), samples, threshold=1.0), [Label.NEGATIVE] * 3)
        self.assertEqual(predict_batch(ConstantModel(1.0), samples, threshold=1.0), [Label.POSITIVE] * 3)

    def test_predictions_are_batched(self):
        model = ConstantModel(0.9)
        self.assertEqual(len(predict_batch(model, _samples([Label.NEGATIVE] * 10), batch_size=4)), 10)
        self.assertEqual(model.calls, 3)

    @settings(max_examples=100, deadline=None)
    @given(
        probabilities=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30),
        low=st.floats(0.0, 1.0),
        high=st.floats(0.0, 1.0),
    )
    def test_raising_the_threshold_never_adds_positives(self, probabilities, low, high):
        low, high = sorted((low, high))
        samples = _samples([Label.POSITIVE] * len(probabilities))
        loose = predict_batch(SequenceModel(probabilities), samples, low)
        strict = predict_batch(SequenceModel(probabilities), samples, high)
        for a, b in zip(loose, strict):
            if b == Label.POSITIVE:
                self.assertEqual(a, Label.POSITIVE)


class ConfusionTests(SimpleTestCase):
    def test_balanced_test_split(self):
        truth = [Label.POSITIVE] * 700 + [Label.NEGATIVE] * 700
        predicted = [Label.POSITIVE] * 685 + [Label.NEGATIVE] * 15 + [Label.POSITIVE] * 5 + [Label.NEGATIVE] * 695
        self.assertEqual(confusion_counts(predicted, truth), ConfusionMatrix(tp=685, fp=5, tn=695, fn=15))

    def test_inverted_predictions_swap_the_counts(self):
        truth = [Label.POSITIVE, Label.POSITIVE, Label.NEGATIVE]
        predicted = [Label.POSITIVE, Label.NEGATIVE, Label.NEGATIVE]
        inverted = [Label.NEGATIVE if label == Label.POSITIVE else Label.POSITIVE for label in predicted]
        cm = confusion_counts(predicted, truth)
        flipped = confusion_counts(inverted, truth)
        self.assertEqual((flipped.tp, flipped.fp, flipped.tn, flipped.fn), (cm.fn, cm.tn, cm.fp, cm.tp))

    def test_counts_match_hand_enumeration(self):
        truth = [Label.POSITIVE, Label.NEGATIVE] * 5
        predicted = [Label.POSITIVE, Label.POSITIVE, Label.NEGATIVE, Label.NEGATIVE, Label.POSITIVE,
                     Label.NEGATIVE, Label.POSITIVE, Label.NEGATIVE, Label.NEGATIVE, Label.POSITIVE]
        expected = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
        for guess, actual in zip(predicted, truth):
            key = ("t" if guess == actual else "f") + ("p" if guess == Label.POSITIVE else "n")
            expected[key] += 1
        self.assertEqual(confusion_counts(predicted, truth).to_dict(), expected)

    def test_single_class_ground_truth_keeps_both_rows(self):
        cm = confusion_counts([Label.POSITIVE, Label.NEGATIVE, Label.NEGATIVE], [Label.NEGATIVE] * 3)
        self.assertEqual(cm, ConfusionMatrix(tp=0, fp=1, tn=2, fn=0))
        self.assertIsNone(metrics_from_confusion(cm).recall)
        self.assertEqual(confusion_counts([], []).total, 0)

    def test_length_mismatch(self):
        with self.assertRaises(ShapeError):
            confusion_counts([Label.POSITIVE], [])
        with self.assertRaises(DataError):
            confusion_counts([Label.POSITIVE], [Label.UNLABELED])

    def test_evaluate_samples_uses_the_model(self):
        samples = _samples([Label.POSITIVE, Label.NEGATIVE, Label.POSITIVE])
        cm = evaluate_samples(SequenceModel([0.9, 0.7, 0.1]), samples)
        self.assertEqual(cm.to_dict(), {"tp": 1, "fp": 1, "tn": 0, "fn": 1})

    def test_mean_counts_are_rounded(self):
        mean = ConfusionMatrix.mean(
            [ConfusionMatrix(10, 1, 9, 0), ConfusionMatrix(11, 2, 8, 0), ConfusionMatrix(11, 2, 8, 0)]
        )
        self.assertEqual(mean, ConfusionMatrix(11, 2, 8, 0))
        with self.assertRaises(DataError):
            ConfusionMatrix.mean([])


class AggregationTests(SimpleTestCase):
    def test_identical_runs_have_zero_spread(self):
        stats = aggregate_runs([MetricSet(0.9, 0.9, 0.9, 0.9)] * 3)
        self.assertAlmostEqual(stats.mean("accuracy"), 0.9)
        self.assertEqual(stats.sd("accuracy"), 0.0)
        self.assertFalse(stats.single_run)

    def test_sample_standard_deviation(self):
        stats = aggregate_runs([MetricSet(1.0, 0.98, 0.98, 0.98), MetricSet(1.0, 0.99, 0.99, 0.99)])
        self.assertAlmostEqual(stats.mean("accuracy"), 0.985)
        self.assertAlmostEqual(stats.sd("accuracy"), 0.0070711, places=6)

    def test_single_run_is_flagged(self):
        with self.assertLogs("pavecrack.evaluation", level="WARNING"):
            stats = aggregate_runs([MetricSet(None, 0.5, 0.75, 0.6667)])
        self.assertTrue(stats.single_run)
        self.assertEqual(stats.sd("f1"), 0.0)
        self.assertIsNone(stats.mean("precision"))
        with self.assertRaises(DataError):
            aggregate_runs([])

    def test_undefined_precision_is_skipped_in_the_mean(self):
        stats = aggregate_runs([MetricSet(None, 0.0, 0.5, 0.0), MetricSet(1.0, 0.5, 0.75, 0.6667)])
        self.assertEqual(stats.metrics["precision"].n, 1)
        self.assertEqual(stats.mean("precision"), 1.0)

    def test_boosts_are_averaged(self):
        stats = aggregate_runs(
            [MetricSet(1.0, 0.9, 0.9, 0.9), MetricSet(1.0, 0.9, 0.9, 0.9)], boosts=[(0.04, 0.1), (0.06, 0.2)]
        )
        self.assertAlmostEqual(stats.boost[0], 0.05)
        self.assertAlmostEqual(stats.boost[1], 0.15)


class FinetuneBoostTests(SimpleTestCase):
    def test_boost_is_measured_from_the_last_head_only_epoch(self):
        history = _history([0.80, 0.90, 0.93, 0.94], [0.5, 0.4, 0.35, 0.3], start=2)
        accuracy_gain, loss_drop = finetune_boost(history)
        self.assertAlmostEqual(accuracy_gain, 0.04)
        self.assertAlmostEqual(loss_drop, 0.1)

    def test_flat_history_has_no_boost(self):
        history = _history([0.7] * 4, [0.6] * 4, start=2)
        self.assertEqual(finetune_boost(history), (0.0, 0.0))

    def test_single_phase_history_is_undefined(self):
        with self.assertRaises(UndefinedBoostError):
            finetune_boost(_history([0.7] * 4, [0.6] * 4, start=4))
        history = _history([0.7] * 4, [0.6] * 4, start=2)
        history.records = [record for record in history.records if record.phase == Phase.FINE_TUNE]
        with self.assertRaises(UndefinedBoostError):
            finetune_boost(history)


class SelectionTests(SimpleTestCase):
    def _summary(self, backbone, accuracy, fn):
        stats = aggregate_runs([MetricSet(1.0, 0.9, accuracy, 0.9), MetricSet(1.0, 0.9, accuracy, 0.9)])
        return VariantSummary(backbone, "noaug", stats, ConfusionMatrix(tp=700 - fn, fp=0, tn=700, fn=fn))

    def test_near_ties_prefer_fewer_false_negatives(self):
        chosen = select_best([self._summary("ResNet", 0.9863, 15), self._summary("VGG16", 0.9860, 12)])
        self.assertEqual(chosen.backbone, "VGG16")

    def test_clear_winner_ignores_false_negatives(self):
        chosen = select_best([self._summary("ResNet", 0.99, 15), self._summary("VGG16", 0.98, 2)])
        self.assertEqual(chosen.backbone, "ResNet")
        with self.assertRaises(DataError):
            select_best([])
