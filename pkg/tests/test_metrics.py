"""Tests for metrics module."""

import csv
import json
import math

import numpy as np
import pytest

from psigan.data import load_split
from psigan.metrics import (
    EvaluationReport,
    MetricRecord,
    boundary,
    dice,
    evaluate_predictions,
    evaluate_run,
    hd95,
    intensity_histogram,
    kl_divergence,
    kl_intensity_divergence,
    per_label_kl,
    report_columns,
    write_report,
)
from psigan.models import Branch, ModelBundle


def square(size=32, top=10, left=10, side=10):
    mask = np.zeros((size, size), dtype=bool)
    mask[top : top + side, left : left + side] = True
    return mask


def brute_force_hd95(a, b):
    def edge(mask):
        out = []
        for r, c in zip(*np.nonzero(mask)):
            neighbours = [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
            if any(
                not (0 <= i < mask.shape[0] and 0 <= j < mask.shape[1]) or not mask[i, j]
                for i, j in neighbours
            ):
                out.append((r, c))
        return np.array(out, dtype=float)

    pa, pb = edge(a), edge(b)
    da = [min(math.dist(p, q) for q in pb) for p in pa]
    db = [min(math.dist(q, p) for p in pa) for q in pb]
    return max(np.percentile(da, 95), np.percentile(db, 95))


def brute_force_dice(a, b):
    tp = fp = fn = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        tp += x and y
        fp += x and not y
        fn += y and not x
    return 1.0 if tp + fp + fn == 0 else 2 * tp / (fp + 2 * tp + fn)


def random_mask_pairs(count=20, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.random((size, size)) < 0.3, rng.random((size, size)) < 0.3) for _ in range(count)]


def rigid_transforms():
    return [np.fliplr, np.flipud, np.rot90, lambda m: np.rot90(m, 2), np.transpose]


class TestDice:
    def test_identical(self):
        assert dice(square(), square()) == 1.0

    def test_disjoint(self):
        assert dice(square(left=0, side=5), square(left=20, side=5)) == 0.0

    def test_hand_counts(self):
        """TP=3, FP=1, FN=1 gives 6/8."""
        pred = np.array([1, 1, 1, 1, 0, 0], dtype=bool)
        gt = np.array([1, 1, 1, 0, 1, 0], dtype=bool)
        assert dice(pred, gt) == 0.75

    def test_both_empty(self):
        assert dice(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="Mask shapes differ"):
            dice(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_matches_brute_force(self):
        for a, b in random_mask_pairs():
            assert dice(a, b) == brute_force_dice(a, b)

    def test_symmetric(self):
        for a, b in random_mask_pairs(seed=3):
            assert dice(a, b) == dice(b, a)

    @pytest.mark.parametrize("transform", rigid_transforms())
    def test_invariant_to_flips_and_rotations(self, transform):
        for a, b in random_mask_pairs(count=5, seed=4):
            assert dice(transform(a), transform(b)) == dice(a, b)


class TestHd95:
    def test_identical(self):
        assert hd95(square(), square()) == 0.0

    def test_shifted_square(self):
        assert hd95(square(left=10), square(left=12)) == pytest.approx(2.0)

    def test_spacing_scales(self):
        assert hd95(square(left=10), square(left=12), spacing=(1.0, 0.5)) == pytest.approx(1.0)

    def test_empty_prediction_is_sentinel(self):
        assert hd95(np.zeros((32, 32)), square()) == math.inf

    def test_both_empty(self):
        assert hd95(np.zeros((8, 8)), np.zeros((8, 8))) == 0.0

    def test_bad_spacing(self):
        with pytest.raises(ValueError, match="Invalid spacing"):
            hd95(square(), square(), spacing=(1.0, 0.0))

    def test_boundary_of_square(self):
        assert boundary(square(side=10)).sum() == 36

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.random((16, 16)) < 0.3
            b = rng.random((16, 16)) < 0.3
            assert hd95(a, b) == pytest.approx(brute_force_hd95(a, b))

    def test_symmetric(self):
        for a, b in random_mask_pairs(seed=5):
            assert hd95(a, b) == pytest.approx(hd95(b, a), abs=1e-12)

    @pytest.mark.parametrize("transform", rigid_transforms())
    def test_invariant_to_flips_and_rotations(self, transform):
        for a, b in random_mask_pairs(count=5, seed=6):
            assert hd95(transform(a), transform(b)) == pytest.approx(hd95(a, b), abs=1e-9)


class TestKl:
    def test_identical_images(self):
        images = np.random.default_rng(1).uniform(-1, 1, (4, 16, 16))
        masks = np.ones_like(images, dtype=bool)
        assert kl_intensity_divergence(images, images, masks) == pytest.approx(0.0, abs=1e-9)

    def test_hand_histograms(self):
        kl = kl_divergence(np.array([0.5, 0.5, 0, 0]), np.array([0.25, 0.25, 0.25, 0.25]))
        assert kl == pytest.approx(math.log(2), abs=1e-6)

    def test_non_negative(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            assert kl_divergence(rng.random(16), rng.random(16)) >= 0

    def test_histogram_bins(self):
        with pytest.raises(ValueError, match="Must be >= 8"):
            intensity_histogram(np.zeros((2, 2)), np.ones((2, 2)), bins=4)

    def test_empty_mask(self):
        with pytest.raises(ValueError, match="no pixels"):
            intensity_histogram(np.zeros((2, 2)), np.zeros((2, 2)))

    def test_per_label_absent_label(self):
        images = np.zeros((1, 8, 8))
        labels = np.zeros((1, 8, 8), dtype=int)
        labels[0, :4] = 1
        kl = per_label_kl(images, labels, images, labels, num_labels=3)
        assert kl[1] == pytest.approx(0.0, abs=1e-9)
        assert kl[2] is None


class TestEvaluate:
    def test_perfect_oracle(self):
        gt = np.zeros((3, 32, 32), dtype=int)
        gt[:, 4:12, 4:12] = 1
        gt[:, 20:28, 16:30] = 2
        report = evaluate_predictions(gt, gt, num_labels=3)
        assert report.overall_mean == 1.0
        assert all(r.hd95 == {1: 0.0, 2: 0.0} for r in report.records)

    def test_inf_excluded_and_counted(self):
        gt = np.zeros((2, 32, 32), dtype=int)
        gt[:, 4:12, 4:12] = 1
        pred = gt.copy()
        pred[1] = 0
        report = evaluate_predictions(pred, gt, num_labels=2)
        assert report.labels[1].hd95_inf_count == 1
        assert report.labels[1].hd95_mean == 0.0
        assert report.overall_mean == pytest.approx(0.5)

    def test_nothing_to_evaluate(self):
        with pytest.raises(ValueError, match="Nothing"):
            evaluate_predictions(np.zeros((0, 4, 4)), np.zeros((0, 4, 4)), 2)

    def test_untrained_model_on_split(self, smoke_manifest):
        dataset = load_split(smoke_manifest, "target_test")
        segmentor = ModelBundle("tiny", num_labels=3).segmentor
        report = evaluate_run(segmentor, dataset, 3, Branch.S_CM)
        assert len(report.records) == 4
        assert 0.0 <= report.overall_mean <= 1.0
        assert report.branch == "S_CM"

    def test_unlabeled_split(self, smoke_manifest):
        dataset = load_split(smoke_manifest, "target_train")
        with pytest.raises(ValueError, match="no ground-truth masks"):
            evaluate_run(ModelBundle("tiny", num_labels=3).segmentor, dataset, 3)


class TestReportFiles:
    def test_columns(self):
        assert report_columns(3) == [
            "schema_version", "sample", "dice_1", "dice_2", "hd95_1", "hd95_2", "overall_dice", "kl_1", "kl_2",
        ]

    def test_write_report(self, tmp_path):
        records = [
            MetricRecord("a", {1: 1.0}, {1: 0.0}),
            MetricRecord("b", {1: 0.0}, {1: math.inf}),
        ]
        report = EvaluationReport(2, "S_M", records).summarize()
        csv_path, json_path = write_report(report, tmp_path)
        with open(csv_path) as f:
            rows = list(csv.DictReader(f))
        assert [r["hd95_1"] for r in rows] == ["0", "inf"]
        assert rows[0]["kl_1"] == ""
        data = json.loads(json_path.read_text())
        assert data["samples"][1]["hd95"]["1"] is None
        assert data["labels"]["1"]["hd95_inf_count"] == 1
