"""Box geometry, IoU-family measures, decoding, target assignment and loss.

Boxes live in pixel space as (center x, center y, width, height).  All
functions here are pure; the training loss builds a differentiable graph
through the tensor engine so its gradients reach the raw head outputs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in pixels with optional score and class id."""

    cx: float
    cy: float
    w: float
    h: float
    score: float | None = None
    cls: int | None = None

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @staticmethod
    def from_corners(x1: float, y1: float, x2: float, y2: float,
                     score: float | None = None, cls: int | None = None) -> "Box":
        return Box((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, score, cls)

    def area(self) -> float:
        return self.w * self.h

    def with_score(self, score: float) -> "Box":
        return replace(self, score=score)


def _inter_union(a: Box, b: Box) -> tuple[float, float]:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area() + b.area() - inter
    return inter, union


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is empty."""
    inter, union = _inter_union(a, b)
    return inter / union if union > 0 else 0.0


def giou(a: Box, b: Box) -> float:
    """IoU minus the enclosing-box penalty (|C| - |A u B|) / |C|."""
    inter, union = _inter_union(a, b)
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    c = cw * ch
    i = inter / union if union > 0 else 0.0
    if c <= 0:
        return i
    return i - (c - union) / c


def giou_loss(a: Box, b: Box) -> float:
    return 1.0 - giou(a, b)


def diou(a: Box, b: Box) -> float:
    """IoU penalized by squared center distance over squared enclosing
    diagonal; the NMS suppression measure."""
    i = iou(a, b)
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    c2 = (max(ax2, bx2) - min(ax1, bx1)) ** 2 + (max(ay2, by2) - min(ay1, by1)) ** 2
    if c2 <= 0:
        return i
    rho2 = (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2
    return i - rho2 / c2


def diou_nms(boxes: list[Box], overlap_threshold: float = 0.45,
             score_threshold: float = 0.0) -> list[Box]:
    """Greedy NMS suppressing a candidate when DIoU(kept, candidate) exceeds
    ``overlap_threshold``.

    Boxes below ``score_threshold`` are dropped first.  Processing order is
    deterministic: descending score, ties broken by input index.  Suppression
    only applies within the same class.
    """
    order = sorted((k for k, b in enumerate(boxes)
                    if b.score is not None and b.score >= score_threshold),
                   key=lambda k: (-boxes[k].score, k))
    kept: list[Box] = []
    for k in order:
        cand = boxes[k]
        if all(b.cls != cand.cls or diou(b, cand) <= overlap_threshold for b in kept):
            kept.append(cand)
    return kept


# ---------------------------------------------------------------------------
# head decoding and target assignment
# ---------------------------------------------------------------------------


def _check_head_channels(channels: int) -> int:
    if channels % 3 != 0 or channels // 3 < 6:
        raise ConfigError(f"head has {channels} channels; expected 3*(5+classes)")
    return channels // 3 - 5


def decode_head(raw, anchors: np.ndarray, stride: int) -> list[list[Box]]:
    """Decode one detection head into boxes, one list per batch image.

    Per cell (i, j) and anchor (aw, ah):
    cx = (sigmoid(tx)+j)*stride, cy = (sigmoid(ty)+i)*stride,
    w = aw*exp(tw), h = ah*exp(th), score = sigmoid(obj)*max_c sigmoid(cls_c).
    """
    data = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
    n, c, gh, gw = data.shape
    nc = _check_head_channels(c)
    anchors = np.asarray(anchors, dtype=float).reshape(3, 2)
    per = 5 + nc
    t = data.reshape(n, 3, per, gh, gw)

    def sig(x):
        return 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))

    jj = np.arange(gw).reshape(1, 1, 1, gw)
    ii = np.arange(gh).reshape(1, 1, gh, 1)
    cx = (sig(t[:, :, 0]) + jj) * stride
    cy = (sig(t[:, :, 1]) + ii) * stride
    w = anchors[:, 0].reshape(1, 3, 1, 1) * np.exp(np.clip(t[:, :, 2], -60, 60))
    h = anchors[:, 1].reshape(1, 3, 1, 1) * np.exp(np.clip(t[:, :, 3], -60, 60))
    obj = sig(t[:, :, 4])
    cls_p = sig(t[:, :, 5:])
    best_cls = cls_p.argmax(axis=2)
    score = obj * np.take_along_axis(cls_p, best_cls[:, :, None], axis=2)[:, :, 0]

    out: list[list[Box]] = []
    for b in range(n):
        out.append([Box(cx[b, a, i, j], cy[b, a, i, j], w[b, a, i, j], h[b, a, i, j],
                        float(score[b, a, i, j]), int(best_cls[b, a, i, j]))
                    for a in range(3) for i in range(gh) for j in range(gw)])
    return out


def encode_box(box: Box, anchor: tuple[float, float], stride: int,
               cell: tuple[int, int], obj: float = 0.999999,
               cls_p: float = 0.999999) -> np.ndarray:
    """Inverse of the decode map for one (cell, anchor) slot; test helper and
    documentation of the decode convention."""
    i, j = cell

    def logit(p):
        return float(np.log(p / (1.0 - p)))

    tx = logit(box.cx / stride - j)
    ty = logit(box.cy / stride - i)
    tw = float(np.log(box.w / anchor[0]))
    th = float(np.log(box.h / anchor[1]))
    return np.array([tx, ty, tw, th, logit(obj), logit(cls_p)])


def shape_iou(wh_a, wh_b) -> float:
    """IoU of two boxes sharing a center; depends only on the dimensions."""
    inter = min(wh_a[0], wh_b[0]) * min(wh_a[1], wh_b[1])
    union = wh_a[0] * wh_a[1] + wh_b[0] * wh_b[1] - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class Assignment:
    """One positive training target: the (scale, anchor, cell) slot that a
    ground-truth box is regressed from."""

    scale: int
    anchor: int
    cell: tuple[int, int]
    box: Box
    obj: float = 1.0
    cls: int = 0


def assign_targets(gt_boxes: list[Box], anchors: np.ndarray,
                   grid_sizes: list[tuple[int, int]],
                   strides: tuple[int, ...] = (8, 16, 32),
                   record_id: str = "") -> list[Assignment]:
    """Assign each ground truth to the single (scale, anchor) maximizing
    shape-IoU, at the grid cell containing its center.

    Anchors must be the 9 (w, h) priors sorted ascending by area and grouped
    three per scale.  Ties break toward the lower anchor index.  Zero-area
    boxes are rejected with a warning naming the record.
    """
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 2)
    if anchors.shape[0] != 3 * len(strides):
        raise ConfigError(f"expected {3 * len(strides)} anchors, got {anchors.shape[0]}")
    areas = anchors[:, 0] * anchors[:, 1]
    if np.any(np.diff(areas) < 0):
        raise ConfigError("anchors must be sorted ascending by area")

    out: list[Assignment] = []
    for gt in gt_boxes:
        if gt.w <= 0 or gt.h <= 0:
            warnings.warn(f"rejecting zero-area ground truth in record {record_id!r}")
            continue
        ious = np.array([shape_iou((gt.w, gt.h), a) for a in anchors])
        best = int(ious.argmax())  # first occurrence wins ties
        s, a = best // 3, best % 3
        gh, gw = grid_sizes[s]
        j = min(max(int(gt.cx // strides[s]), 0), gw - 1)
        i = min(max(int(gt.cy // strides[s]), 0), gh - 1)
        out.append(Assignment(scale=s, anchor=a, cell=(i, j), box=gt,
                              cls=gt.cls if gt.cls is not None else 0))
    return out


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------


def giou_terms(pcx: Tensor, pcy: Tensor, pw: Tensor, ph: Tensor,
               gt: np.ndarray) -> Tensor:
    """Differentiable per-pair GIoU between predicted (1-D tensors) and
    constant ground-truth boxes (P, 4) in cxcywh form."""
    gx1 = Tensor(gt[:, 0] - gt[:, 2] / 2)
    gy1 = Tensor(gt[:, 1] - gt[:, 3] / 2)
    gx2 = Tensor(gt[:, 0] + gt[:, 2] / 2)
    gy2 = Tensor(gt[:, 1] + gt[:, 3] / 2)
    garea = Tensor(gt[:, 2] * gt[:, 3])

    px1 = pcx - pw * 0.5
    py1 = pcy - ph * 0.5
    px2 = pcx + pw * 0.5
    py2 = pcy + ph * 0.5

    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    union = pw * ph + garea - inter
    iou_t = inter / union
    cw = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    ch = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    c = cw * ch
    return iou_t - (c - union) / c


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with logits: softplus(x) - x*t, elementwise."""
    t = Tensor(np.asarray(targets, dtype=logits.data.dtype))
    return (T.softplus(logits) - logits * t).mean()


def total_loss(heads: list[Tensor], targets: list[list[Assignment]],
               anchors: np.ndarray, strides: tuple[int, ...] = (8, 16, 32),
               num_classes: int = 1,
               weights: tuple[float, float, float] = (0.05, 1.0, 0.5),
               ) -> tuple[Tensor, dict[str, float]]:
    """Combined detection loss over a batch.

    box term: mean GIoU loss over positive slots; objectness: BCE over every
    cell of every head; class: BCE over positives.  ``targets`` holds one
    assignment list per batch image.  Returns the scalar loss tensor and a
    per-term float breakdown.
    """
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 2)
    lam_box, lam_obj, lam_cls = weights
    per = 5 + num_classes
    n_batch = heads[0].data.shape[0]
    if len(targets) != n_batch:
        raise ConfigError(f"{len(targets)} target lists for batch of {n_batch}")

    box_losses: list[Tensor] = []
    cls_losses: list[Tensor] = []
    obj_parts: list[Tensor] = []
    obj_targets: list[np.ndarray] = []

    for s, head in enumerate(heads):
        n, c, gh, gw = head.data.shape
        if _check_head_channels(c) != num_classes:
            raise ConfigError(f"head {s} channels {c} inconsistent with "
                              f"{num_classes} classes")

        pos = [(b, a) for b in range(n_batch) for a in targets[b] if a.scale == s]

        def flat(b, a, ch, i, j):
            return ((b * c + a * per + ch) * gh + i) * gw + j

        if pos:
            bidx = np.array([b for b, _ in pos])
            aidx = np.array([a.anchor for _, a in pos])
            ci = np.array([a.cell[0] for _, a in pos])
            cj = np.array([a.cell[1] for _, a in pos])
            gt = np.array([[a.box.cx, a.box.cy, a.box.w, a.box.h] for _, a in pos])

            tx = T.take(head, flat(bidx, aidx, 0, ci, cj))
            ty = T.take(head, flat(bidx, aidx, 1, ci, cj))
            tw = T.take(head, flat(bidx, aidx, 2, ci, cj))
            th = T.take(head, flat(bidx, aidx, 3, ci, cj))
            aw = anchors[s * 3 + aidx, 0]
            ah = anchors[s * 3 + aidx, 1]
            pcx = (T.sigmoid(tx) + Tensor(cj.astype(float))) * float(strides[s])
            pcy = (T.sigmoid(ty) + Tensor(ci.astype(float))) * float(strides[s])
            pw = T.exp(tw) * Tensor(aw)
            ph = T.exp(th) * Tensor(ah)
            box_losses.append(1.0 - giou_terms(pcx, pcy, pw, ph, gt))

            cls_idx = np.stack([flat(bidx, aidx, 5 + k, ci, cj)
                                for k in range(num_classes)], axis=1).ravel()
            cls_t = np.zeros((len(pos), num_classes))
            cls_t[np.arange(len(pos)), [a.cls for _, a in pos]] = 1.0
            cls_logits = T.take(head, cls_idx)
            cls_losses.append(T.softplus(cls_logits) - cls_logits * Tensor(cls_t.ravel()))

        b_all = np.arange(n_batch)[:, None, None, None]
        a_all = np.arange(3)[None, :, None, None]
        i_all = np.arange(gh)[None, None, :, None]
        j_all = np.arange(gw)[None, None, None, :]
        obj_idx = np.broadcast_to(((b_all * c + a_all * per + 4) * gh + i_all) * gw + j_all,
                                  (n_batch, 3, gh, gw))
        obj_t = np.zeros((n_batch, 3, gh, gw))
        for b, a in pos:
            obj_t[b, a.anchor, a.cell[0], a.cell[1]] = a.obj
        obj_logits = T.take(head, obj_idx.ravel())
        obj_parts.append(T.softplus(obj_logits) - obj_logits * Tensor(obj_t.ravel()))
        obj_targets.append(obj_t)

    obj_all = T.concat(obj_parts, axis=0)
    obj_term = obj_all.mean()

    n_pos = sum(len(t) for t in targets)
    if n_pos == 0:
        warnings.warn("no positive assignments in batch; box and class terms are 0")
        total = lam_obj * obj_term
        breakdown = {"box": 0.0, "obj": float(obj_term.data), "cls": 0.0,
                     "total": float(total.data)}
        return total, breakdown

    box_term = T.concat(box_losses, axis=0).mean()
    cls_term = T.concat(cls_losses, axis=0).mean()
    total = lam_box * box_term + lam_obj * obj_term + lam_cls * cls_term
    breakdown = {"box": float(box_term.data), "obj": float(obj_term.data),
                 "cls": float(cls_term.data), "total": float(total.data)}
    return total, breakdown


# ---------------------------------------------------------------------------
# detections export
# ---------------------------------------------------------------------------


def format_detections(image_id: str, boxes: list[Box]) -> str:
    """One text line per box: image id, class, score, x1 y1 x2 y2 (4 dp)."""
    lines = []
    for b in boxes:
        x1, y1, x2, y2 = b.corners()
        lines.append(f"{image_id} {b.cls if b.cls is not None else 0} "
                     f"{b.score if b.score is not None else 0.0:.4f} "
                     f"{x1:.4f} {y1:.4f} {x2:.4f} {y2:.4f}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_detections(text: str) -> dict[str, list[Box]]:
    """Inverse of :func:`format_detections`, grouping boxes by image id."""
    out: dict[str, list[Box]] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        image_id, cls, score, x1, y1, x2, y2 = line.split()
        out.setdefault(image_id, []).append(
            Box.from_corners(float(x1), float(y1), float(x2), float(y2),
                             score=float(score), cls=int(cls)))
    return out
