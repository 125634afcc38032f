"""End-to-end orchestration: training with SGD, batched inference with
DIoU-NMS, dataset evaluation and activation-map export.

Everything here is deterministic given (config, seed): the same run
reproduces identical logs and numeric artifacts.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import ModelGraph, build_template, rfp_unroll
from .boxes import Box, assign_targets, decode_head, diou_nms, total_loss
from .checkpoint import load_into_graph, save_checkpoint
from .config import ModelConfig, RunConfig
from .data import AUGMENT_OPS, DatasetRecord, augment, letterbox
from .errors import DataError
from .evaluate import EvalReport, evaluate_detections
from .tensor import Tensor


def build_model(model_cfg: ModelConfig, seed: int = 0) -> ModelGraph:
    """Canonical graph: template + recursive-pyramid unroll."""
    return rfp_unroll(build_template(model_cfg, seed=seed), model_cfg.rfp_steps)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class SGD:
    """SGD with momentum and decoupled parameter groups.

    Weight decay applies to convolution weights only; biases and norm
    affine parameters are excluded.  Bias learning rate and momentum follow
    the warmup schedule the caller computes per iteration.
    """

    def __init__(self, params: dict[str, Tensor], weight_decay: float):
        self.weights = [p for n, p in params.items() if n.endswith(".w")]
        self.biases = [p for n, p in params.items() if n.endswith(".b")]
        self.others = [p for n, p in params.items()
                       if not n.endswith(".w") and not n.endswith(".b")]
        self.weight_decay = weight_decay
        self._vel: dict[int, np.ndarray] = {}

    def step(self, lr: float, bias_lr: float, momentum: float):
        for group, rate, decay in ((self.weights, lr, self.weight_decay),
                                   (self.others, lr, 0.0),
                                   (self.biases, bias_lr, 0.0)):
            for p in group:
                if p.grad is None:
                    continue
                g = p.grad if not decay else p.grad + decay * p.data
                v = self._vel.get(id(p))
                if v is None:
                    v = self._vel[id(p)] = np.zeros_like(p.data)
                v *= momentum
                v += g
                p.data -= rate * v

    def zero_grad(self):
        for group in (self.weights, self.biases, self.others):
            for p in group:
                p.grad = None


@dataclass
class Schedule:
    """Per-iteration learning rate / momentum values: linear warmup of
    momentum and bias lr over the first epochs, step lr decay at 60% and
    90% of the run."""

    run: RunConfig
    iters_per_epoch: int

    def at(self, epoch: int, it: int) -> tuple[float, float, float]:
        r = self.run
        lr = r.lr
        if r.epochs:
            if epoch >= int(0.9 * r.epochs):
                lr *= r.lr_gamma * r.lr_gamma
            elif epoch >= int(0.6 * r.epochs):
                lr *= r.lr_gamma
        warm_iters = r.warmup_epochs * self.iters_per_epoch
        step = epoch * self.iters_per_epoch + it
        if r.warmup_epochs > 0 and step < warm_iters:
            frac = (step + 1) / warm_iters
            momentum = r.warmup_momentum + frac * (r.momentum - r.warmup_momentum)
            bias_lr = r.warmup_bias_lr + frac * (lr - r.warmup_bias_lr)
            lr = lr * frac
        else:
            momentum, bias_lr = r.momentum, lr
        return lr, bias_lr, momentum


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def _to_input(images: list[np.ndarray]) -> Tensor:
    arr = np.stack([img.transpose(2, 0, 1) for img in images]).astype(np.float64)
    return Tensor(arr / 255.0)


def prepare_batch(records: list[DatasetRecord], size: int, anchors: np.ndarray,
                  strides=(8, 16, 32)):
    """Letterboxed input tensor plus per-image positive assignments."""
    grids = [(size // s, size // s) for s in strides]
    images, targets = [], []
    for rec in records:
        lb, _ = letterbox(rec, size)
        images.append(lb.image)
        targets.append(assign_targets(list(lb.boxes), anchors, grids,
                                      strides, record_id=rec.image_id))
    return _to_input(images), targets


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class Detection:
    image_id: str
    boxes: list[Box]            # original-image pixel space
    seconds: float


def detect_records(graph: ModelGraph, records: list[DatasetRecord],
                   run: RunConfig) -> list[Detection]:
    """letterbox -> forward -> decode -> score filter -> DIoU-NMS -> inverse
    letterbox, batched; per-image wall time recorded."""
    anchors = graph.meta["anchors"]
    out: list[Detection] = []
    for at in range(0, len(records), run.batch_size):
        chunk = records[at:at + run.batch_size]
        lbs, tfs = zip(*(letterbox(r, run.input_size) for r in chunk))
        start = time.perf_counter()
        with T.no_grad():
            heads = graph.forward_heads(_to_input([r.image for r in lbs]))
        decoded: list[list[Box]] = [[] for _ in chunk]
        for s, head in enumerate(heads):
            stride = run.input_size // head.data.shape[2]
            for b, boxes in enumerate(decode_head(head, anchors[3 * s:3 * s + 3],
                                                  stride)):
                decoded[b].extend(boxes)
        elapsed = time.perf_counter() - start
        for rec, tf, boxes in zip(chunk, tfs, decoded):
            kept = diou_nms(boxes, overlap_threshold=run.nms_threshold,
                            score_threshold=run.conf_threshold)
            out.append(Detection(rec.image_id,
                                 [tf.invert_box(b) for b in kept],
                                 elapsed / len(chunk)))
    return out


def evaluate_records(graph: ModelGraph, records: list[DatasetRecord],
                     run: RunConfig, conf_threshold: float | None = None,
                     ) -> EvalReport:
    """Detect then score a record list; low default confidence floor so the
    PR curve covers the full recall range."""
    eval_run = run if conf_threshold is None else _with_conf(run, conf_threshold)
    dets = detect_records(graph, records, eval_run)
    per_image = [(d.boxes, list(r.boxes), r.tags) for d, r in zip(dets, records)]
    report = evaluate_detections(per_image, iou_threshold=run.iou_threshold)
    total = sum(d.seconds for d in dets)
    report.images_per_second = len(records) / total if total > 0 else None
    return report


def _with_conf(run: RunConfig, conf: float) -> RunConfig:
    from dataclasses import replace
    return replace(run, conf_threshold=conf)

EVAL_CONF_THRESHOLD = 0.001


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    graph: ModelGraph
    log_lines: list[str] = field(default_factory=list)
    best_val_ap: float = float("nan")
    best_epoch: int = -1
    test_ap: float = float("nan")


def _random_augment(rec: DatasetRecord, rng: np.random.Generator) -> DatasetRecord:
    # the adopted augmentation pair: flips plus 90-degree rotations
    if rng.random() < 0.5:
        rec = augment(rec, "hflip" if rng.random() < 0.5 else "vflip")
    k = int(rng.integers(0, 4))
    if k:
        rec = augment(rec, AUGMENT_OPS[1 + k])  # rot90/rot180/rot270
    return rec


def train_model(train_records: list[DatasetRecord],
                val_records: list[DatasetRecord],
                model_cfg: ModelConfig, run: RunConfig,
                checkpoint_path, log=None) -> TrainResult:
    """SGD training loop; logs per-epoch loss and val AP, keeps the
    best-val-AP checkpoint at ``checkpoint_path``."""
    if not train_records:
        raise DataError("training split is empty")
    graph = build_model(model_cfg, seed=run.seed)
    anchors = graph.meta["anchors"]
    result = TrainResult(graph)

    def emit(line: str):
        result.log_lines.append(line)
        if log is not None:
            log(line)

    if run.epochs == 0:
        save_checkpoint(checkpoint_path, graph.state_arrays())
        return result

    # fixed-size letterboxed cache; augmentation works on the square copies
    cache = [letterbox(r, run.input_size)[0] for r in train_records]
    opt = SGD(graph.params, run.weight_decay)
    rng = np.random.default_rng(run.seed)
    iters = max(1, (len(cache) + run.batch_size - 1) // run.batch_size)
    sched = Schedule(run, iters)
    grids = [(run.input_size // s, run.input_size // s) for s in (8, 16, 32)]

    best_ap = -1.0
    for epoch in range(run.epochs):
        order = rng.permutation(len(cache))
        sums = {"box": 0.0, "obj": 0.0, "cls": 0.0, "total": 0.0}
        lr_last = 0.0
        for it in range(iters):
            idx = order[it * run.batch_size:(it + 1) * run.batch_size]
            if idx.size == 0:
                continue
            recs = [cache[i] for i in idx]
            if run.augment:
                recs = [_random_augment(r, rng) for r in recs]
            images = _to_input([r.image for r in recs])
            targets = [assign_targets(list(r.boxes), anchors, grids,
                                      record_id=r.image_id) for r in recs]
            heads = graph.forward_heads(images, train=True)
            loss, parts = total_loss(heads, targets, anchors,
                                     num_classes=model_cfg.num_classes,
                                     weights=run.loss_weights)
            opt.zero_grad()
            loss.backward()
            lr, bias_lr, momentum = sched.at(epoch, it)
            opt.step(lr, bias_lr, momentum)
            lr_last = lr
            for k in sums:
                sums[k] += parts[k]

        means = {k: v / iters for k, v in sums.items()}
        if val_records:
            val_ap = evaluate_records(graph, val_records, run,
                                      conf_threshold=EVAL_CONF_THRESHOLD).ap
        else:
            val_ap = float("nan")
        emit(f"epoch {epoch + 1} loss {means['total']:.6f} box {means['box']:.6f} "
             f"obj {means['obj']:.6f} cls {means['cls']:.6f} "
             f"val_ap {val_ap:.6f} lr {lr_last:.6g}")
        if not np.isnan(val_ap) and val_ap > best_ap:
            best_ap = val_ap
            result.best_val_ap = val_ap
            result.best_epoch = epoch + 1
            save_checkpoint(checkpoint_path, graph.state_arrays())

    if best_ap < 0:  # no val split: keep the final weights
        save_checkpoint(checkpoint_path, graph.state_arrays())
    else:
        load_into_graph(checkpoint_path, graph)
    return result


# ---------------------------------------------------------------------------
# activation maps
# ---------------------------------------------------------------------------


def activation_maps(graph: ModelGraph, record: DatasetRecord, size: int,
                    layer_names: list[str]) -> dict[str, np.ndarray]:
    """Per-channel-mean feature maps of the named layers, min-max normalized
    to 8-bit grayscale."""
    missing = [n for n in layer_names if n not in graph.nodes]
    if missing:
        available = ", ".join(n for n in graph.nodes if n != "input")
        raise DataError(f"unknown layer(s) {missing}; available: {available}")
    lb, _ = letterbox(record, size)
    with T.no_grad():
        outs = graph.forward(_to_input([lb.image]))
    maps = {}
    for name in layer_names:
        fm = outs[name].data[0].mean(axis=0)
        lo, hi = fm.min(), fm.max()
        norm = (fm - lo) / (hi - lo) if hi > lo else np.zeros_like(fm)
        maps[name] = np.round(norm * 255).astype(np.uint8)
    return maps
