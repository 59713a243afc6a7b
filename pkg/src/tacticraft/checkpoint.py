"""Checkpoint format: a key/value text manifest plus one binary blob.

The manifest lists parameter names with their shapes and byte offsets; the
blob holds the values as little-endian float32 in manifest order. A
checkpoint is a directory containing ``manifest.txt`` and ``weights.bin``.
Training-state sidecars (float64, for bit-exact resume) are handled by the
trainer on top of this interchange format.
"""

from __future__ import annotations

import os

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError

MANIFEST_NAME = "manifest.txt"
BLOB_NAME = "weights.bin"
_DTYPE = "<f4"


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def save_checkpoint(directory: str, tensors: dict) -> None:
    """Write named arrays (or Tensors) as manifest + float32 blob."""
    os.makedirs(directory, exist_ok=True)
    lines = ["format=tacticraft-ckpt-1", f"dtype={_DTYPE}", f"blob={BLOB_NAME}"]
    offset = 0
    chunks = []
    for name in sorted(tensors):
        if "=" in name or " " in name:
            raise CheckpointError(f"illegal character in tensor name {name!r}")
        arr = _as_array(tensors[name])
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"{name}={shape}@{offset}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        chunks.append(raw)
        offset += len(raw)
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(directory, BLOB_NAME), "wb") as fh:
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(directory: str) -> dict:
    """Read a checkpoint back as float64 numpy arrays keyed by name."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"no manifest at {manifest_path}")
    header = {}
    entries = []
    with open(manifest_path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise CheckpointError(f"malformed manifest line {line_no}: {line!r}")
            key, value = line.split("=", 1)
            if key in ("format", "dtype", "blob"):
                header[key] = value
                continue
            try:
                shape_s, offset_s = value.rsplit("@", 1)
                shape = () if shape_s == "scalar" else tuple(
                    int(d) for d in shape_s.split("x"))
                offset = int(offset_s)
            except ValueError as exc:
                raise CheckpointError(
                    f"malformed manifest entry line {line_no}: {line!r}") from exc
            entries.append((key, shape, offset))
    if header.get("format") != "tacticraft-ckpt-1":
        raise CheckpointError(f"unknown checkpoint format {header.get('format')!r}")

    blob_path = os.path.join(directory, header.get("blob", BLOB_NAME))
    try:
        blob = open(blob_path, "rb").read()
    except OSError as exc:
        raise CheckpointError(f"cannot read blob {blob_path}: {exc}") from exc

    itemsize = np.dtype(_DTYPE).itemsize
    out = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * itemsize
        if offset + nbytes > len(blob):
            raise CheckpointError(
                f"blob truncated: tensor {name} needs bytes "
                f"[{offset}, {offset + nbytes}) but blob has {len(blob)}")
        arr = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=offset)
        out[name] = arr.astype(np.float64).reshape(shape)
    return out
