"""Flat JSON parameter checkpoints.

A checkpoint is a versioned map from dot-separated parameter path to
shape + row-major values. Python's repr-based JSON float encoding is
shortest-round-trip, so 64-bit values survive save/load bit-exactly.
"""

from __future__ import annotations

import json

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, params, buffers=None, meta=None):
    """Write parameters (and optional buffers) to a JSON checkpoint.

    `params` maps path -> Tensor, `buffers` maps path -> ndarray.
    """
    entries = {}
    for name, t in params.items():
        entries[name] = {"shape": list(t.shape),
                         "data": np.asarray(t.data, dtype=np.float64).reshape(-1).tolist()}
    for name, arr in (buffers or {}).items():
        entries[name] = {"shape": list(np.shape(arr)),
                         "data": np.asarray(arr, dtype=np.float64).reshape(-1).tolist()}
    doc = {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors: {path: ndarray}, meta)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    tensors = {}
    for name, entry in doc["tensors"].items():
        arr = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: {arr.size} values for shape {shape}")
        tensors[name] = arr.reshape(shape)
    return tensors, doc.get("meta", {})
