"""Dataset ingestion, deterministic splitting, augmentation, letterboxing
and the synthetic desk-scale dataset generator.

Dataset layout on disk::

    root/images/*.png|ppm      8-bit color images
    root/labels/<id>.txt       one "class cx cy w h" line per box, normalized
    root/tags/<id>.txt         optional, one scenario tag per line
    root/splits/{train,val,test}.txt   written by ``split`` manifests

Augmentation is restricted to flips and 90-degree rotations so that boxes
stay axis-aligned and every op has an exact inverse.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .boxes import Box
from .errors import DataError
from .imageio import SUPPORTED, read_image, write_image

SCENARIO_TAGS = frozenset({
    "strong_light", "weak_light", "normal_light",
    "high_overlap", "moderate_overlap", "normal_overlap",
    "high_occlusion", "moderate_occlusion", "normal_occlusion",
})

PAD_COLOR = 114  # letterbox gray


@dataclass(frozen=True)
class DatasetRecord:
    """One image with its ground-truth boxes and optional scenario tags."""

    image_id: str
    image: np.ndarray            # (H, W, 3) uint8
    boxes: tuple[Box, ...]
    tags: tuple[str, ...] = ()

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def _parse_label_line(line: str, w: int, h: int, path: Path, lineno: int) -> Box:
    parts = line.split()
    if len(parts) != 5:
        raise DataError(f"{path}:{lineno}: expected 'class cx cy w h', got {line!r}")
    try:
        cls = int(parts[0])
        vals = [float(v) for v in parts[1:]]
    except ValueError:
        raise DataError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
    if any(v < 0.0 or v > 1.0 for v in vals):
        raise DataError(f"{path}:{lineno}: normalized coordinate outside [0,1] "
                        f"in {line!r}")
    cx, cy, bw, bh = vals[0] * w, vals[1] * h, vals[2] * w, vals[3] * h
    # clamp corners into image bounds; exact inputs pass through untouched
    x1 = max(cx - bw / 2, 0.0)
    y1 = max(cy - bh / 2, 0.0)
    x2 = min(cx + bw / 2, float(w))
    y2 = min(cy + bh / 2, float(h))
    if not (x1 < x2 and y1 < y2):
        raise DataError(f"{path}:{lineno}: degenerate box in {line!r}")
    return Box.from_corners(x1, y1, x2, y2, cls=cls)


def load_dataset(root: str | Path) -> list[DatasetRecord]:
    """Load every image under ``root/images`` with its labels and tags."""
    root = Path(root)
    images_dir = root / "images"
    labels_dir = root / "labels"
    if not images_dir.is_dir():
        raise DataError(f"missing images directory: {images_dir}")
    if not labels_dir.is_dir():
        raise DataError(f"missing labels directory: {labels_dir}")

    records = []
    for img_path in sorted(p for p in images_dir.iterdir()
                           if p.suffix.lower() in SUPPORTED):
        image = read_image(img_path)
        h, w = image.shape[:2]
        image_id = img_path.stem
        label_path = labels_dir / f"{image_id}.txt"
        boxes: list[Box] = []
        if label_path.exists():
            for lineno, line in enumerate(label_path.read_text().splitlines(), 1):
                if line.strip():
                    boxes.append(_parse_label_line(line, w, h, label_path, lineno))
        else:
            warnings.warn(f"no label file for image {image_id!r}; loading with 0 boxes")
        tags: tuple[str, ...] = ()
        tag_path = root / "tags" / f"{image_id}.txt"
        if tag_path.exists():
            raw = tuple(t.strip() for t in tag_path.read_text().splitlines() if t.strip())
            for t in raw:
                if t not in SCENARIO_TAGS:
                    raise DataError(f"{tag_path}: unknown scenario tag {t!r}")
            tags = raw
        records.append(DatasetRecord(image_id, image, tuple(boxes), tags))
    if not records:
        raise DataError(f"no images found under {images_dir}")
    return records


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def split(records: list[DatasetRecord], ratios: tuple[int, ...] = (6, 3, 1),
          seed: int = 0) -> tuple[list[DatasetRecord], ...]:
    """Deterministic shuffle + largest-remainder partition into len(ratios)
    disjoint, exhaustive parts."""
    if any(r <= 0 for r in ratios):
        raise DataError(f"ratios must be positive, got {ratios}")
    n = len(records)
    if n < len(ratios):
        raise DataError(f"cannot split {n} records into {len(ratios)} partitions")
    total = sum(ratios)
    quotas = [n * r / total for r in ratios]
    sizes = [int(q) for q in quotas]
    # hand out the remaining slots by largest fractional part, index as tiebreak
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in range(n - sum(sizes)):
        sizes[order[i % len(ratios)]] += 1

    perm = np.random.default_rng(seed).permutation(n)
    parts: list[list[DatasetRecord]] = []
    at = 0
    for s in sizes:
        parts.append([records[k] for k in perm[at:at + s]])
        at += s
    return tuple(parts)


def write_split_manifests(root: str | Path, parts: tuple[list[DatasetRecord], ...],
                          names: tuple[str, ...] = ("train", "val", "test")) -> None:
    out = Path(root) / "splits"
    out.mkdir(parents=True, exist_ok=True)
    for name, recs in zip(names, parts):
        (out / f"{name}.txt").write_text(
            "".join(f"{r.image_id}\n" for r in recs))


def load_split(root: str | Path, records: list[DatasetRecord],
               name: str) -> list[DatasetRecord]:
    manifest = Path(root) / "splits" / f"{name}.txt"
    if not manifest.exists():
        raise DataError(f"missing split manifest {manifest}")
    wanted = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    by_id = {r.image_id: r for r in records}
    missing = [w for w in wanted if w not in by_id]
    if missing:
        raise DataError(f"split {name!r} references unknown images: {missing[:3]}")
    return [by_id[w] for w in wanted]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

AUGMENT_OPS = ("hflip", "vflip", "rot90", "rot180", "rot270")


def _map_box(box: Box, op: str, w: int, h: int) -> Box:
    if op == "hflip":
        return replace(box, cx=w - box.cx)
    if op == "vflip":
        return replace(box, cy=h - box.cy)
    if op == "rot90":     # counterclockwise: (x, y) -> (y, W - x)
        return replace(box, cx=box.cy, cy=w - box.cx, w=box.h, h=box.w)
    if op == "rot180":
        return replace(box, cx=w - box.cx, cy=h - box.cy)
    if op == "rot270":    # clockwise: (x, y) -> (H - y, x)
        return replace(box, cx=h - box.cy, cy=box.cx, w=box.h, h=box.w)
    raise DataError(f"unknown augment op {op!r}; choose from {AUGMENT_OPS}")


def augment(record: DatasetRecord, op: str) -> DatasetRecord:
    """Apply one flip/rotation to pixels and boxes.

    hflip and vflip are involutions; rot90/rot270 invert each other and
    rot180 inverts itself, all bit-exactly.
    """
    img = record.image
    if op == "hflip":
        out = img[:, ::-1]
    elif op == "vflip":
        out = img[::-1]
    elif op == "rot90":
        out = np.rot90(img, 1)
    elif op == "rot180":
        out = np.rot90(img, 2)
    elif op == "rot270":
        out = np.rot90(img, 3)
    else:
        raise DataError(f"unknown augment op {op!r}; choose from {AUGMENT_OPS}")
    h, w = record.height, record.width
    boxes = tuple(_map_box(b, op, w, h) for b in record.boxes)
    return DatasetRecord(record.image_id, np.ascontiguousarray(out), boxes, record.tags)


INVERSE_OP = {"hflip": "hflip", "vflip": "vflip", "rot90": "rot270",
              "rot180": "rot180", "rot270": "rot90"}


# ---------------------------------------------------------------------------
# letterbox
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LetterboxTransform:
    """Affine map (uniform scale + pad offsets) from original to network
    pixels, kept so detections can be mapped back."""

    scale: float
    pad_x: float
    pad_y: float
    orig_w: int
    orig_h: int
    size: int

    def apply_box(self, box: Box) -> Box:
        return replace(box, cx=box.cx * self.scale + self.pad_x,
                       cy=box.cy * self.scale + self.pad_y,
                       w=box.w * self.scale, h=box.h * self.scale)

    def invert_box(self, box: Box) -> Box:
        return replace(box, cx=(box.cx - self.pad_x) / self.scale,
                       cy=(box.cy - self.pad_y) / self.scale,
                       w=box.w / self.scale, h=box.h / self.scale)


def letterbox(record: DatasetRecord, size: int) -> tuple[DatasetRecord, LetterboxTransform]:
    """Aspect-preserving resize onto a ``size`` x ``size`` canvas with
    centered gray padding; boxes move through the same affine map."""
    if size % 32 != 0:
        raise DataError(f"letterbox size {size} must be divisible by 32")
    h, w = record.height, record.width
    if h == w == size:
        tf = LetterboxTransform(1.0, 0.0, 0.0, w, h, size)
        return record, tf
    scale = min(size / w, size / h)
    nw, nh = int(round(w * scale)), int(round(h * scale))
    left, top = (size - nw) // 2, (size - nh) // 2

    ri = (np.arange(nh) * h) // nh
    ci = (np.arange(nw) * w) // nw
    resized = record.image[ri][:, ci]
    canvas = np.full((size, size, 3), PAD_COLOR, dtype=np.uint8)
    canvas[top:top + nh, left:left + nw] = resized

    tf = LetterboxTransform(scale, float(left), float(top), w, h, size)
    boxes = tuple(tf.apply_box(b) for b in record.boxes)
    return DatasetRecord(record.image_id, canvas, boxes, record.tags), tf


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

# flower-ish palette for the single target class and off-palette distractors
_TARGET_COLORS = [(235, 210, 60), (245, 235, 120), (250, 200, 40)]
_DISTRACTOR_COLORS = [(70, 90, 200), (160, 60, 170), (90, 160, 210)]


def _draw_ellipse(img: np.ndarray, cx: float, cy: float, a: float, b: float,
                  color: tuple[int, int, int], rng: np.random.Generator,
                  textured: bool) -> np.ndarray | None:
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    mask = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    if not mask.any():
        return None
    base = np.array(color, dtype=float)
    if textured:
        # radial petal streaks: brightness modulated by angle around center
        ang = np.arctan2(yy - cy, xx - cx)
        mod = 0.75 + 0.25 * np.cos(8 * ang)
        shade = base[None, None, :] * mod[:, :, None]
    else:
        shade = np.broadcast_to(base, img.shape).copy()
        shade = shade * rng.uniform(0.85, 1.0)
    img[mask] = np.clip(shade[mask], 0, 255).astype(np.uint8)
    return mask


def _mask_box(mask: np.ndarray) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    # integer pixel bounds give half-integer centers: flips stay bit-exact
    return Box.from_corners(float(cols[0]), float(rows[0]),
                            float(cols[-1] + 1), float(rows[-1] + 1), cls=0)


def synth_record(index: int, rng: np.random.Generator, size: int = 256,
                 overlap_ratio: float = 0.0) -> DatasetRecord:
    """Generate one synthetic image: solid background, 1-8 elliptical target
    "flowers" plus distractors, exact boxes and scenario tags."""
    img = np.empty((size, size, 3), dtype=np.uint8)
    bg = rng.integers(25, 90, size=3)
    img[:, :] = bg

    masks: list[np.ndarray] = []
    min_r, max_r = size // 20, size // 6
    n_targets = int(rng.integers(1, 6))
    inject_overlap = rng.random() < overlap_ratio

    centers = []
    for t in range(n_targets):
        a = rng.uniform(min_r, max_r)
        b = a * rng.uniform(0.7, 1.3)
        cx = rng.uniform(max_r, size - max_r)
        cy = rng.uniform(max_r, size - max_r)
        color = _TARGET_COLORS[rng.integers(len(_TARGET_COLORS))]
        m = _draw_ellipse(img, cx, cy, a, b, color, rng, textured=True)
        if m is not None:
            masks.append(m)
            centers.append((cx, cy, a, b))

    injected_iou = 0.0
    if inject_overlap and centers:
        # overlapping partner close to the first flower; IoU >= 0.3 by offset
        cx, cy, a, b = centers[0]
        m = _draw_ellipse(img, cx + 0.5 * a, cy + 0.15 * b, a, b,
                          _TARGET_COLORS[rng.integers(len(_TARGET_COLORS))],
                          rng, textured=True)
        if m is not None:
            masks.append(m)

    boxes = [_mask_box(m) for m in masks]

    # occlusion: distractor drawn over the last flower
    occ_frac = 0.0
    if rng.random() < 0.5 and masks:
        victim = masks[-1]
        vb = boxes[-1]
        m = _draw_ellipse(img, vb.cx + vb.w * rng.uniform(0.2, 0.45),
                          vb.cy, vb.w * 0.45, vb.h * 0.45,
                          _DISTRACTOR_COLORS[rng.integers(len(_DISTRACTOR_COLORS))],
                          rng, textured=False)
        if m is not None:
            occ_frac = float((victim & m).sum() / victim.sum())
    elif rng.random() < 0.4:
        _draw_ellipse(img, rng.uniform(max_r, size - max_r),
                      rng.uniform(max_r, size - max_r),
                      rng.uniform(min_r, max_r), rng.uniform(min_r, max_r),
                      _DISTRACTOR_COLORS[rng.integers(len(_DISTRACTOR_COLORS))],
                      rng, textured=False)

    # lighting scenario: global gain applied after drawing
    light = rng.random()
    if light < 0.2:
        img = np.clip(img.astype(np.int16) + 90, 0, 255).astype(np.uint8)
        light_tag = "strong_light"
    elif light < 0.4:
        img = (img.astype(np.float64) * 0.45).astype(np.uint8)
        light_tag = "weak_light"
    else:
        light_tag = "normal_light"

    from .boxes import iou as box_iou
    pair_ious = [box_iou(p, q) for k, p in enumerate(boxes) for q in boxes[k + 1:]]
    if inject_overlap and pair_ious and max(pair_ious) >= 0.3:
        injected_iou = max(pair_ious)
        overlap_tag = "high_overlap"
    elif pair_ious and max(pair_ious) >= 0.1:
        overlap_tag = "moderate_overlap"
    else:
        overlap_tag = "normal_overlap"

    if occ_frac > 0.35:
        occ_tag = "high_occlusion"
    elif occ_frac > 0.12:
        occ_tag = "moderate_occlusion"
    else:
        occ_tag = "normal_occlusion"

    del injected_iou
    return DatasetRecord(f"synth_{index:05d}", img, tuple(boxes),
                         (light_tag, overlap_tag, occ_tag))


def synth_dataset(n: int, out_dir: str | Path, seed: int = 0, size: int = 256,
                  overlap_ratio: float = 0.0) -> list[DatasetRecord]:
    """Write ``n`` synthetic records to ``out_dir`` in the dataset layout.

    Fully determined by ``seed``; labels are written with shortest
    round-trip float repr so reloading reproduces coordinates exactly.
    """
    if n < 1:
        raise DataError(f"need n >= 1 images, got {n}")
    out = Path(out_dir)
    for sub in ("images", "labels", "tags"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        rec = synth_record(i, rng, size=size, overlap_ratio=overlap_ratio)
        write_image(out / "images" / f"{rec.image_id}.png", rec.image)
        lines = []
        for b in rec.boxes:
            lines.append(f"{b.cls} {b.cx / rec.width!r} {b.cy / rec.height!r} "
                         f"{b.w / rec.width!r} {b.h / rec.height!r}")
        (out / "labels" / f"{rec.image_id}.txt").write_text(
            "".join(line + "\n" for line in lines))
        (out / "tags" / f"{rec.image_id}.txt").write_text(
            "".join(t + "\n" for t in rec.tags))
        records.append(rec)
    return records
