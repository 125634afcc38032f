"""Reading and writing images as uint8 numpy arrays.

PPM (binary P6/P5) is handled directly so tests need no image dependency;
PNG goes through Pillow.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError

SUPPORTED = (".ppm", ".pgm", ".png")


def read_image(path: str | Path) -> np.ndarray:
    """Load an image as (H, W, 3) uint8."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext in (".ppm", ".pgm"):
        arr = _read_pnm(path)
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        return arr
    if ext == ".png":
        from PIL import Image
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    raise DataError(f"unsupported image format {ext!r} for {path}")


def write_image(path: str | Path, arr: np.ndarray) -> None:
    """Write (H, W, 3) or (H, W) uint8 to PPM/PGM/PNG by extension."""
    path = Path(path)
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    ext = path.suffix.lower()
    if ext in (".ppm", ".pgm"):
        _write_pnm(path, arr)
        return
    if ext == ".png":
        from PIL import Image
        Image.fromarray(arr).save(path)
        return
    raise DataError(f"unsupported image format {ext!r} for {path}")


def _read_pnm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    fields: list[bytes] = []
    pos = 0
    # header = magic, width, height, maxval; '#' starts a comment
    while len(fields) < 4 and pos < len(data):
        if data[pos:pos + 1].isspace():
            pos += 1
        elif data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            fields.append(data[pos:end])
            pos = end
    if len(fields) < 4 or fields[0] not in (b"P5", b"P6"):
        raise DataError(f"not a binary PPM/PGM file: {path}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise DataError(f"only maxval 255 supported, got {maxval} in {path}")
    pos += 1  # single whitespace after header
    channels = 3 if fields[0] == b"P6" else 1
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=pos)
    if raw.size != w * h * channels:
        raise DataError(f"truncated pixel data in {path}")
    arr = raw.reshape(h, w, channels)
    return arr[:, :, 0] if channels == 1 else arr


def _write_pnm(path: Path, arr: np.ndarray) -> None:
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise DataError(f"cannot write array of shape {arr.shape} as PNM")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())
