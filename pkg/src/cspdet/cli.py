"""Command line frontend.

Subcommands: anchors, synth, train, detect, eval, analyze, activations.
Values resolve as defaults < config file (--graph) < explicit flags.  On
failure a single machine-parseable line ``error:<category>: <message>`` goes
to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import glob
import sys
import time
from pathlib import Path

import numpy as np

from .anchors import format_anchors, kmeans_anchors, mean_best_iou
from .blocks import analyze_cio, spp_params
from .boxes import format_detections
from .checkpoint import load_into_graph
from .config import (RunConfig, apply_overrides, builtin_config_path,
                     load_config, update_anchors_in_config)
from .data import (DatasetRecord, load_dataset, load_split, split,
                   synth_dataset, write_split_manifests)
from .errors import CspdetError, DataError
from .evaluate import render_curve, render_report, render_report_csv
from .imageio import read_image, write_image
from .pipeline import (EVAL_CONF_THRESHOLD, activation_maps, build_model,
                       detect_records, evaluate_records, train_model)


def _load_configs(args):
    path = args.graph or builtin_config_path("default")
    model_cfg, run = load_config(path)
    overrides = {}
    for flag, field in (("size", "input_size"), ("epochs", "epochs"),
                        ("batch", "batch_size"), ("lr", "lr"), ("seed", "seed"),
                        ("conf", "conf_threshold"), ("nms", "nms_threshold"),
                        ("iou", "iou_threshold")):
        if hasattr(args, flag):
            overrides[field] = getattr(args, flag)
    return model_cfg, apply_overrides(run, **overrides)


def _dataset_dims(records) -> np.ndarray:
    dims = [(b.w, b.h) for r in records for b in r.boxes]
    if not dims:
        raise DataError("dataset has no ground-truth boxes")
    return np.asarray(dims)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_anchors(args) -> int:
    records = load_dataset(args.data)
    if args.size:
        from .data import letterbox
        records = [letterbox(r, args.size)[0] for r in records]
    dims = _dataset_dims(records)
    res = kmeans_anchors(dims, k=args.k, seed=args.seed)
    sys.stdout.write(format_anchors(res.anchors))
    print(f"mean-best-iou {mean_best_iou(dims, res.anchors):.6f}")
    if args.update_config:
        update_anchors_in_config(args.update_config, res.anchors)
        print(f"wrote anchors into {args.update_config}")
    return 0


def cmd_synth(args) -> int:
    records = synth_dataset(args.n, args.out, seed=args.seed, size=args.size,
                            overlap_ratio=args.overlap)
    n_boxes = sum(len(r.boxes) for r in records)
    print(f"wrote {len(records)} images ({n_boxes} boxes) to {args.out}")
    return 0


def cmd_train(args) -> int:
    model_cfg, run = _load_configs(args)
    records = load_dataset(args.data)
    train_recs, val_recs, test_recs = split(records, (6, 3, 1), seed=run.seed)
    write_split_manifests(args.data, (train_recs, val_recs, test_recs))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "best.ckpt"
    log_path = out / "train.log"
    lines: list[str] = []

    def log(line: str):
        lines.append(line)
        print(line)

    start = time.perf_counter()
    result = train_model(train_recs, val_recs, model_cfg, run, ckpt, log=log)
    if test_recs and run.epochs > 0:
        report = evaluate_records(result.graph, test_recs, run,
                                  conf_threshold=EVAL_CONF_THRESHOLD)
        log(f"test_ap {report.ap:.6f}")
    log_path.write_text("".join(line + "\n" for line in lines))
    print(f"training took {time.perf_counter() - start:.1f}s; "
          f"checkpoint: {ckpt}")
    return 0


def _load_model_with_checkpoint(args):
    model_cfg, run = _load_configs(args)
    graph = build_model(model_cfg, seed=run.seed)
    load_into_graph(args.ckpt, graph)
    return graph, run


def _draw_boxes(img: np.ndarray, boxes) -> np.ndarray:
    out = img.copy()
    h, w = out.shape[:2]
    for b in boxes:
        x1, y1, x2, y2 = (int(round(v)) for v in b.corners())
        x1, x2 = max(x1, 0), min(x2, w - 1)
        y1, y2 = max(y1, 0), min(y2, h - 1)
        for t in range(2):
            out[max(y1 - t, 0), x1:x2 + 1] = (255, 40, 40)
            out[min(y2 + t, h - 1), x1:x2 + 1] = (255, 40, 40)
            out[y1:y2 + 1, max(x1 - t, 0)] = (255, 40, 40)
            out[y1:y2 + 1, min(x2 + t, w - 1)] = (255, 40, 40)
    return out


def cmd_detect(args) -> int:
    graph, run = _load_model_with_checkpoint(args)
    paths = sorted(p for pattern in args.images for p in glob.glob(pattern))
    if not paths:
        raise DataError(f"no images match {args.images}")
    records = [DatasetRecord(Path(p).stem, read_image(p), ()) for p in paths]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    detections = detect_records(graph, records, run)
    for rec, det in zip(records, detections):
        (out / f"{det.image_id}.txt").write_text(
            format_detections(det.image_id, det.boxes))
        if args.draw:
            write_image(out / f"{det.image_id}.png",
                        _draw_boxes(rec.image, det.boxes))
    total = sum(d.seconds for d in detections)
    fps = len(records) / total if total > 0 else float("inf")
    print(f"{len(records)} images in {total:.3f}s ({fps:.2f} images/s); "
          f"results in {out}")
    return 0


def cmd_eval(args) -> int:
    graph, run = _load_model_with_checkpoint(args)
    records = load_dataset(args.data)
    if args.split:
        records = load_split(args.data, records, args.split)
    report = evaluate_records(graph, records, run,
                              conf_threshold=EVAL_CONF_THRESHOLD)
    sys.stdout.write(render_report_csv(report) if args.csv
                     else render_report(report))
    if args.curve:
        Path(args.curve).write_text(render_curve(report))
        print(f"PR curve points written to {args.curve}")
    return 0


def cmd_analyze(args) -> int:
    model_cfg, run = _load_configs(args)
    graph = build_model(model_cfg, seed=run.seed)
    shapes = graph.infer_shapes(run.input_size, run.input_size)

    print(f"input {run.input_size}x{run.input_size}")
    if args.csv:
        print("node,kind,channels,height,width")
        for name, spec in graph.nodes.items():
            c, h, w = shapes[name]
            print(f"{name},{spec.kind},{c},{h},{w}")
    else:
        width = max(len(n) for n in graph.nodes)
        for name, spec in graph.nodes.items():
            c, h, w = shapes[name]
            print(f"{name:<{width}} {spec.kind:<10} {c:>5} x {h:>4} x {w:>4}")

    rows, total = analyze_cio(graph)
    print()
    if args.csv:
        print("block,c,m,d,dense_cio,partial_cio,saving")
        for r in rows + [total]:
            print(f"{r.block},{r.c},{r.m},{r.d},{r.dense},{r.partial},"
                  f"{r.saving:.4f}")
    else:
        print(f"{'block':<16} {'c':>5} {'m':>3} {'d':>5} {'dense':>8} "
              f"{'partial':>8} {'saving':>7}")
        for r in rows + [total]:
            print(f"{r.block:<16} {r.c:>5} {r.m:>3} {r.d:>5} {r.dense:>8} "
                  f"{r.partial:>8} {r.saving * 100:>6.1f}%")

    for name, spec in graph.nodes.items():
        if spec.kind == "spp":
            h = shapes[spec.inputs[0]][1]
            for n in spec.args["bins"]:
                if spp_params(h, n).degenerate:
                    print(f"warning: spp node {name!r} bin {n} is degenerate "
                          f"for input extent {h}")

    heads = ", ".join(f"{shapes[h][1]}x{shapes[h][2]}" for h in graph.head_names)
    print(f"\nheads: {heads}")
    print(f"parameters: {graph.param_count()}")
    return 0


def cmd_activations(args) -> int:
    graph, run = _load_model_with_checkpoint(args)
    record = DatasetRecord(Path(args.image).stem, read_image(args.image), ())
    layers = [s.strip() for s in args.layers.split(",") if s.strip()]
    maps = activation_maps(graph, record, run.input_size, layers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, gray in maps.items():
        path = out / f"{record.image_id}_{name.replace('.', '_')}.png"
        write_image(path, gray)
        print(f"{name} -> {path} ({gray.shape[0]}x{gray.shape[1]})")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cspdet",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_graph(p):
        p.add_argument("--graph", help="YAML graph/run config "
                       "(default: packaged canonical config)")

    p = sub.add_parser("anchors", help="estimate anchor priors by k-means")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--size", type=int, help="letterbox to this input size first")
    p.add_argument("--update-config", help="write anchors into this YAML config")
    p.set_defaults(fn=cmd_anchors)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--overlap", type=float, default=0.0,
                   help="fraction of images given an injected overlapping pair")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    add_graph(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/train")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("detect", help="run detection on images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", nargs="+", required=True, help="path globs")
    add_graph(p)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--conf", type=float, default=None)
    p.add_argument("--nms", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/detect")
    p.add_argument("--draw", action="store_true")
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    add_graph(p)
    p.add_argument("--iou", type=float, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split", help="evaluate only this split manifest")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--curve", help="write recall,precision points here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="report shapes, CIO and parameters")
    add_graph(p)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("activations", help="export grayscale feature maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layers", required=True, help="comma-separated node names")
    add_graph(p)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/activations")
    p.set_defaults(fn=cmd_activations)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CspdetError as e:
        print(f"error:{e.category}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error:io: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
