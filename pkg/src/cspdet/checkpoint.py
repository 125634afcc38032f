"""Parameter checkpoint file: versioned text header + raw little-endian
float32 payload.

Format (documented bit-exactly; see also docs/checkpoint.md)::

    line 1:      "cspdet-checkpoint 1\\n"
    line 2:      "tensors <count>\\n"
    next lines:  "<name> <ndim> <d0> <d1> ...\\n"   one per tensor,
                 sorted ascending by name
    then:        "end\\n"
    payload:     the tensors' float32 values, little-endian, C order,
                 concatenated in header order

Both trainable parameters and batch-norm running buffers are stored.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = "cspdet-checkpoint"
VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    for name in names:
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name contains whitespace: {name!r}")
    header = [f"{MAGIC} {VERSION}", f"tensors {len(names)}"]
    header += [f"{n} {arrays[n].ndim} " + " ".join(str(d) for d in arrays[n].shape)
               for n in names]
    header.append("end")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        for n in names:
            f.write(np.ascontiguousarray(arrays[n], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint into float64 arrays keyed by tensor name."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    try:
        head_end = blob.index(b"end\n") + 4
    except ValueError:
        raise CheckpointError(f"{path}: missing header terminator") from None
    lines = blob[:head_end].decode("ascii").splitlines()
    if not lines or lines[0].split() != [MAGIC, str(VERSION)]:
        raise CheckpointError(f"{path}: bad magic/version line {lines[:1]!r}")
    if len(lines) < 2 or lines[1].split()[0] != "tensors":
        raise CheckpointError(f"{path}: missing tensor count line")
    count = int(lines[1].split()[1])
    entries = []
    for line in lines[2:2 + count]:
        parts = line.split()
        name, ndim = parts[0], int(parts[1])
        shape = tuple(int(d) for d in parts[2:2 + ndim])
        entries.append((name, shape))
    if len(entries) != count or lines[2 + count] != "end":
        raise CheckpointError(f"{path}: header inconsistent with tensor count")

    out: dict[str, np.ndarray] = {}
    offset = head_end
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        raw = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        if raw.size != n:
            raise CheckpointError(f"{path}: truncated payload at tensor {name!r}")
        out[name] = raw.reshape(shape).astype(np.float64)
        offset += 4 * n
    return out


def load_into_graph(path: str | Path, graph) -> None:
    """Assign checkpoint tensors into a built graph, validating shapes.

    Raises naming the first mismatched layer.
    """
    arrays = load_checkpoint(path)
    expected = graph.state_arrays()
    for name in sorted(expected):
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing tensor {name!r}")
        if arrays[name].shape != expected[name].shape:
            raise CheckpointError(
                f"shape mismatch at {name!r}: checkpoint has "
                f"{arrays[name].shape}, graph expects {expected[name].shape}")
    extra = sorted(set(arrays) - set(expected))
    if extra:
        raise CheckpointError(f"checkpoint has unknown tensors: {extra[:3]}")
    for name, tensor in graph.params.items():
        tensor.data = arrays[name]
    for name in graph.buffers:
        graph.buffers[name][...] = arrays[name]
