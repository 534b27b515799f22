"""BVTK tensor files and directory checkpoints.

Layout of a .bvtk file, all little-endian:

    magic   5 bytes  "BVTK1"
    dtype   1 byte   0 = float32, 1 = float64
    ndim    1 byte
    dims    ndim x u64
    payload row-major values

A checkpoint is a directory of .bvtk files plus a ``manifest.json`` that
maps tensor names to filenames and carries the architecture metadata
needed to validate completeness and shapes on load.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"BVTK1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    code = _CODES[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([code, arr.ndim]))
        fh.write(np.asarray(arr.shape, dtype="<u8").tobytes())
        fh.write(arr.astype(_DTYPES[code], copy=False).tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Load and validate one tensor; rejects bad magic, dtype, size, or non-finite data."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:5] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:5]!r}, expected {MAGIC!r}")
    if len(raw) < 7:
        raise FormatError(f"{path}: truncated header")
    code, ndim = raw[5], raw[6]
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    header_end = 7 + 8 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dimension list")
    dims = np.frombuffer(raw[7:header_end], dtype="<u8").astype(np.int64)
    dtype = _DTYPES[code]
    count = int(dims.prod()) if ndim else 1
    expected = count * dtype.itemsize
    if len(raw) - header_end != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - header_end} bytes, expected {expected}"
        )
    data = np.frombuffer(raw[header_end:], dtype=dtype).reshape(tuple(int(d) for d in dims))
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: payload contains NaN or Inf")
    return data.astype(data.dtype.newbyteorder("="))


def save_checkpoint(directory: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write every named tensor plus a manifest with metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"meta": meta, "tensors": {}}
    for name in sorted(tensors):
        fname = name.replace("/", "_") + ".bvtk"
        write_tensor(directory / fname, tensors[name])
        manifest["tensors"][name] = fname
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(
    directory: str | Path, expected_shapes: dict[str, tuple[int, ...]] | None = None
) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back; validates completeness and shapes when given.

    Returns (tensors, meta).
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{directory}: missing manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    listed = manifest.get("tensors", {})
    tensors = {}
    for name, fname in listed.items():
        fpath = directory / fname
        if not fpath.exists():
            raise FormatError(f"{directory}: manifest lists {name} but {fname} is missing")
        tensors[name] = read_tensor(fpath)
    if expected_shapes is not None:
        missing = sorted(set(expected_shapes) - set(tensors))
        if missing:
            raise FormatError(f"{directory}: checkpoint is missing tensors {missing}")
        extra = sorted(set(tensors) - set(expected_shapes))
        if extra:
            raise FormatError(f"{directory}: checkpoint has unexpected tensors {extra}")
        for name, shape in expected_shapes.items():
            if tensors[name].shape != tuple(shape):
                raise FormatError(
                    f"{directory}: tensor {name} has shape {tensors[name].shape}, expected {tuple(shape)}"
                )
    return tensors, manifest.get("meta", {})
