"""Input validation helpers shared by the estimator API and the CLI."""

from __future__ import annotations

import numpy as np

from .boxes import Box
from .data import DatasetRecord
from .errors import DataError


def check_image(img) -> np.ndarray:
    """Accept (H, W, 3) uint8-convertible arrays."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and arr.max() <= 1.0:
            arr = (arr * 255).round()
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    return arr


def check_records(X) -> list[DatasetRecord]:
    """Accept a list of records or a dataset directory path."""
    if isinstance(X, (str, bytes)) or hasattr(X, "__fspath__"):
        from .data import load_dataset
        return load_dataset(X)
    records = list(X)
    if not records:
        raise DataError("empty record list")
    for r in records:
        if not isinstance(r, DatasetRecord):
            raise DataError(f"expected DatasetRecord items, got {type(r).__name__}")
    return records


def check_box_dims(X) -> np.ndarray:
    dims = np.asarray(X, dtype=float)
    if dims.ndim != 2 or dims.shape[1] != 2:
        raise DataError(f"expected (n, 2) box dimensions, got shape {dims.shape}")
    if (dims <= 0).any():
        raise DataError("box dimensions must be positive")
    return dims


def boxes_of(record_or_boxes) -> list[Box]:
    if isinstance(record_or_boxes, DatasetRecord):
        return list(record_or_boxes.boxes)
    return list(record_or_boxes)
