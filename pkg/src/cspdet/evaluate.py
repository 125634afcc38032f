"""Detection evaluation: greedy matching, all-points average precision and
per-scenario correct/false/missed accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, iou
from .data import SCENARIO_TAGS
from .errors import DataError


def match_detections(dets: list[Box], gts: list[Box], iou_threshold: float = 0.5,
                     ) -> tuple[list[bool], list[bool]]:
    """Greedy matching by descending detection score.

    A detection is a true positive when its best-IoU *unmatched* ground truth
    (of the same class) reaches the threshold; each ground truth matches at
    most once.  Returns (per-detection TP flags, per-gt matched flags) in the
    input orders.
    """
    order = sorted(range(len(dets)), key=lambda k: (-(dets[k].score or 0.0), k))
    tp = [False] * len(dets)
    matched = [False] * len(gts)
    for k in order:
        d = dets[k]
        best, best_j = 0.0, -1
        for j, g in enumerate(gts):
            if matched[j] or (g.cls is not None and d.cls != g.cls):
                continue
            v = iou(d, g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_threshold:
            tp[k] = True
            matched[best_j] = True
    return tp, matched


def average_precision(tp_flags: list[bool], scores: list[float], n_gt: int) -> float:
    """All-points AP: rank detections by score and accumulate
    precision * delta-recall at every rank.

    Returns 0 when there are detections but no ground truth, and NaN
    (reported as not-applicable) when both sides are empty.
    """
    if n_gt == 0:
        return math.nan if not tp_flags else 0.0
    if not tp_flags:
        return 0.0
    order = sorted(range(len(tp_flags)), key=lambda k: (-scores[k], k))
    ap = 0.0
    tp_cum = 0
    prev_recall = 0.0
    for rank, k in enumerate(order, 1):
        if tp_flags[k]:
            tp_cum += 1
        recall = tp_cum / n_gt
        ap += (tp_cum / rank) * (recall - prev_recall)
        prev_recall = recall
    return ap


def pr_curve(tp_flags: list[bool], scores: list[float], n_gt: int,
             ) -> list[tuple[float, float]]:
    """(recall, precision) points of the ranked detection list."""
    order = sorted(range(len(tp_flags)), key=lambda k: (-scores[k], k))
    pts = []
    tp_cum = 0
    for rank, k in enumerate(order, 1):
        if tp_flags[k]:
            tp_cum += 1
        pts.append((tp_cum / n_gt if n_gt else 0.0, tp_cum / rank))
    return pts


@dataclass
class ScenarioRow:
    tag: str
    count: int                   # ground truths over images carrying the tag
    correct: int                 # matched ground truths
    false: int                   # unmatched detections on those images
    missed: int                  # unmatched ground truths

    @property
    def correct_rate(self) -> float:
        return self.correct / self.count if self.count else 0.0

    @property
    def false_rate_gt(self) -> float:
        # false positives over ground-truth count, the row arithmetic used
        # by per-scenario tallies; detection-based rate reported alongside
        return self.false / self.count if self.count else 0.0

    @property
    def missed_rate(self) -> float:
        return self.missed / self.count if self.count else 0.0


@dataclass
class EvalReport:
    iou_threshold: float
    ap: float
    n_images: int
    n_gt: int
    n_det: int
    curve: list[tuple[float, float]] = field(default_factory=list)
    scenario_rows: list[ScenarioRow] = field(default_factory=list)
    images_per_second: float | None = None
    detections_per_tag: dict[str, int] = field(default_factory=dict)


def scenario_report(per_image: list[tuple[list[Box], list[Box], tuple[str, ...]]],
                    iou_threshold: float = 0.5) -> list[ScenarioRow]:
    """Per-tag correct/false/missed accounting.

    ``per_image`` holds (detections, ground truths, tags) triples.  An image
    carrying several tags contributes its boxes to each of them separately.
    """
    acc: dict[str, ScenarioRow] = {}
    for dets, gts, tags in per_image:
        for t in tags:
            if t not in SCENARIO_TAGS:
                raise DataError(f"unknown scenario tag {t!r}")
        tp, matched = match_detections(dets, gts, iou_threshold)
        correct = sum(matched)
        false = len(dets) - sum(tp)
        missed = len(gts) - correct
        for t in tags:
            row = acc.setdefault(t, ScenarioRow(t, 0, 0, 0, 0))
            row.count += len(gts)
            row.correct += correct
            row.false += false
            row.missed += missed
    order = {t: i for i, t in enumerate(sorted(SCENARIO_TAGS))}
    return sorted(acc.values(), key=lambda r: order[r.tag])


def evaluate_detections(per_image: list[tuple[list[Box], list[Box], tuple[str, ...]]],
                        iou_threshold: float = 0.5) -> EvalReport:
    """Aggregate AP, PR curve and scenario rows over a detection run."""
    flags: list[bool] = []
    scores: list[float] = []
    n_gt = 0
    det_per_tag: dict[str, int] = {}
    for dets, gts, tags in per_image:
        tp, _ = match_detections(dets, gts, iou_threshold)
        flags.extend(tp)
        scores.extend(d.score or 0.0 for d in dets)
        n_gt += len(gts)
        for t in tags:
            det_per_tag[t] = det_per_tag.get(t, 0) + len(dets)
    ap = average_precision(flags, scores, n_gt)
    return EvalReport(
        iou_threshold=iou_threshold,
        ap=ap,
        n_images=len(per_image),
        n_gt=n_gt,
        n_det=len(flags),
        curve=pr_curve(flags, scores, n_gt),
        scenario_rows=scenario_report(per_image, iou_threshold),
        detections_per_tag=det_per_tag,
    )


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------


def _fmt_ap(ap: float) -> str:
    return "n/a" if math.isnan(ap) else f"{ap:.6f}"


def render_report(report: EvalReport) -> str:
    lines = [
        f"AP@{report.iou_threshold:g}: {_fmt_ap(report.ap)}",
        f"images: {report.n_images}  ground truths: {report.n_gt}  "
        f"detections: {report.n_det}",
    ]
    if report.images_per_second is not None:
        lines.append(f"inference speed: {report.images_per_second:.2f} images/s")
    if report.scenario_rows:
        lines.append("")
        header = (f"{'scenario':<20} {'count':>6} {'correct':>8} {'rate%':>7} "
                  f"{'false':>6} {'rate%(gt)':>9} {'rate%(det)':>10} "
                  f"{'missed':>7} {'rate%':>7}")
        lines.append(header)
        lines.append("-" * len(header))
        for r in report.scenario_rows:
            det_base = report.detections_per_tag.get(r.tag, 0)
            false_det_rate = r.false / det_base * 100 if det_base else 0.0
            lines.append(
                f"{r.tag:<20} {r.count:>6} {r.correct:>8} {r.correct_rate * 100:>7.2f} "
                f"{r.false:>6} {r.false_rate_gt * 100:>9.2f} {false_det_rate:>10.2f} "
                f"{r.missed:>7} {r.missed_rate * 100:>7.2f}")
    return "\n".join(lines) + "\n"


def render_report_csv(report: EvalReport) -> str:
    lines = ["tag,count,correct,correct_rate,false,false_rate_gt,false_rate_det,"
             "missed,missed_rate"]
    for r in report.scenario_rows:
        det_base = report.detections_per_tag.get(r.tag, 0)
        false_det_rate = r.false / det_base if det_base else 0.0
        lines.append(f"{r.tag},{r.count},{r.correct},{r.correct_rate:.6f},"
                     f"{r.false},{r.false_rate_gt:.6f},{false_det_rate:.6f},"
                     f"{r.missed},{r.missed_rate:.6f}")
    lines.append(f"ap,{_fmt_ap(report.ap)},,,,,,,")
    return "\n".join(lines) + "\n"


def render_curve(report: EvalReport) -> str:
    """PR curve as "recall,precision" point lines for plotting."""
    return "".join(f"{r:.6f},{p:.6f}\n" for r, p in report.curve)
