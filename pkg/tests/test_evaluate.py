import math

import numpy as np
import pytest

from cspdet.boxes import Box, iou
from cspdet.errors import DataError
from cspdet.evaluate import (average_precision, evaluate_detections,
                             match_detections, pr_curve, render_report,
                             render_report_csv, scenario_report)


def db(cx, cy, w, h, score, cls=0):
    return Box(cx, cy, w, h, score=score, cls=cls)


def gb(cx, cy, w, h, cls=0):
    return Box(cx, cy, w, h, cls=cls)


def oracle_match(dets, gts, tau):
    """Independent exhaustive greedy matcher."""
    order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, k))
    tp = [False] * len(dets)
    used = [False] * len(gts)
    for k in order:
        best_iou, best_j = -1.0, -1
        for j in range(len(gts)):
            if used[j] or gts[j].cls != dets[k].cls:
                continue
            v = iou(dets[k], gts[j])
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= tau:
            tp[k] = True
            used[best_j] = True
    return tp, used


class TestMatching:
    def test_exact_hit(self):
        dets = [db(5, 5, 4, 4, 0.9)]
        gts = [gb(5, 5, 4, 4)]
        tp, matched = match_detections(dets, gts)
        assert tp == [True] and matched == [True]

    def test_double_detection_single_match(self):
        gts = [gb(5, 5, 4, 4)]
        dets = [db(5, 5, 4, 4, 0.6), db(5.1, 5, 4, 4, 0.9)]
        tp, matched = match_detections(dets, gts)
        assert tp == [False, True]  # higher score wins the only gt
        assert matched == [True]

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(61)
        for trial in range(200):
            nd, ng = int(rng.integers(0, 7)), int(rng.integers(0, 7))
            dets = [db(*rng.uniform(10, 90, 2), *rng.uniform(3, 30, 2),
                       float(rng.uniform(0, 1))) for _ in range(nd)]
            gts = [gb(*rng.uniform(10, 90, 2), *rng.uniform(3, 30, 2))
                   for _ in range(ng)]
            tau = float(rng.uniform(0.1, 0.9))
            assert match_detections(dets, gts, tau) == oracle_match(dets, gts, tau), \
                f"trial {trial}"

    def test_threshold_extremes(self):
        rng = np.random.default_rng(62)
        dets = [db(*rng.uniform(20, 80, 2), 10, 10, 0.5) for _ in range(5)]
        gts = [gb(*rng.uniform(20, 80, 2), 10, 10) for _ in range(5)]
        tp_hi, _ = match_detections(dets, gts, 1.0 + 1e-9)
        assert not any(tp_hi)
        tp_lo, _ = match_detections(dets, gts, 1e-12)
        overlapping = [any(iou(d, g) > 0 for g in gts) for d in dets]
        assert sum(tp_lo) <= sum(overlapping)


class TestAveragePrecision:
    def test_perfect_run(self):
        assert average_precision([True, True], [0.9, 0.8], 2) == 1.0

    def test_hand_example_tp_fp_tp(self):
        # ranks: TP (P=1, dr=.5), FP, TP (P=2/3, dr=.5) -> 5/6
        ap = average_precision([True, False, True], [0.9, 0.8, 0.7], 2)
        assert ap == pytest.approx(5 / 6)

    def test_no_detections(self):
        assert average_precision([], [], 3) == 0.0

    def test_no_gt_with_detections(self):
        assert average_precision([False], [0.4], 0) == 0.0

    def test_both_empty_not_applicable(self):
        assert math.isnan(average_precision([], [], 0))

    def test_monotone_score_transform_invariance(self):
        rng = np.random.default_rng(63)
        for _ in range(50):
            n = int(rng.integers(1, 12))
            flags = list(rng.random(n) > 0.5)
            scores = list(rng.uniform(0.0, 1.0, n))
            n_gt = max(1, sum(flags) + int(rng.integers(0, 3)))
            base = average_precision(flags, scores, n_gt)
            warped = [math.exp(3 * s) / 40 for s in scores]  # strictly monotone
            assert average_precision(flags, warped, n_gt) == pytest.approx(base)

    def test_trailing_fp_never_increases(self):
        rng = np.random.default_rng(64)
        for _ in range(50):
            n = int(rng.integers(1, 8))
            flags = list(rng.random(n) > 0.4)
            scores = sorted(rng.uniform(0.2, 1.0, n), reverse=True)
            n_gt = max(1, sum(flags))
            base = average_precision(flags, scores, n_gt)
            worse = average_precision(flags + [False], scores + [0.01], n_gt)
            assert worse <= base + 1e-12

    def test_pr_curve_final_recall(self):
        pts = pr_curve([True, False, True], [0.9, 0.8, 0.7], 4)
        assert pts[-1][0] == pytest.approx(0.5)


class TestScenarioReport:
    def _triple(self, n_det_hit, n_det_false, n_gt, tags):
        gts = [gb(10 + 30 * i, 10, 8, 8) for i in range(n_gt)]
        dets = [db(10 + 30 * i, 10, 8, 8, 0.9) for i in range(n_det_hit)]
        dets += [db(200 + 10 * i, 200, 8, 8, 0.8) for i in range(n_det_false)]
        return dets, gts, tags

    def test_perfect_detector(self):
        rows = scenario_report([self._triple(3, 0, 3, ("normal_light",))])
        row = rows[0]
        assert row.correct == 3 and row.false == 0 and row.missed == 0
        assert row.correct_rate == 1.0

    def test_multi_tag_counts_once_per_tag(self):
        rows = scenario_report(
            [self._triple(2, 1, 3, ("weak_light", "high_overlap"))])
        assert len(rows) == 2
        for row in rows:
            assert row.count == 3 and row.correct == 2
            assert row.false == 1 and row.missed == 1

    def test_hand_computed_fixture(self):
        # 3 images, 5 gts, 6 dets: hits 2+1+1, falses 1+0+1, misses 0+1+0
        imgs = [self._triple(2, 1, 2, ("normal_light",)),
                self._triple(1, 0, 2, ("normal_light",)),
                self._triple(1, 1, 1, ("normal_light",))]
        row = scenario_report(imgs)[0]
        assert (row.count, row.correct, row.false, row.missed) == (5, 4, 2, 1)
        assert row.correct + row.missed == row.count
        assert row.correct_rate == pytest.approx(4 / 5)
        assert row.false_rate_gt == pytest.approx(2 / 5)
        assert row.missed_rate == pytest.approx(1 / 5)

    def test_correct_plus_missed_equals_count(self):
        rng = np.random.default_rng(65)
        per_image = []
        for _ in range(20)	:
            nd, ng = int(rng.integers(0, 6)), int(rng.integers(0, 6))
            dets = [db(*rng.uniform(10, 90, 2), 10, 10, float(rng.uniform(0, 1)))
                    for _ in range(nd)]
            gts = [gb(*rng.uniform(10, 90, 2), 10, 10) for _ in range(ng)]
            per_image.append((dets, gts, ("moderate_occlusion",)))
        for row in scenario_report(per_image):
            assert row.correct + row.missed == row.count

    def test_unknown_tag(self):
        with pytest.raises(DataError):
            scenario_report([([], [], ("mystery",))])


class TestReportRendering:
    def _report(self):
        per_image = [([db(5, 5, 4, 4, 0.9)], [gb(5, 5, 4, 4)], ("normal_light",))]
        return evaluate_detections(per_image)

    def test_text_contains_ap_and_rows(self):
        text = render_report(self._report())
        assert "AP@0.5: 1.000000" in text
        assert "normal_light" in text

    def test_csv_rows(self):
        csv = render_report_csv(self._report())
        lines = csv.strip().split("\n")
        assert lines[0].startswith("tag,count,")
        assert any(line.startswith("normal_light,1,1,") for line in lines)

    def test_nan_ap_renders_na(self):
        report = evaluate_detections([([], [], ())])
        assert "n/a" in render_report(report)
