"""Checkpoint files: a JSON manifest line followed by raw float64 buffers.

The manifest carries a format version, arbitrary JSON metadata (model
hyperparameters, training state) and the named tensor directory with
shapes and byte offsets into the data section. Buffers are little-endian
float64 in row-major order, so save/load round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

FORMAT_NAME = "lahst-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_tensors(path, tensors: dict, meta: dict) -> None:
    """Write named float64 tensors plus JSON metadata to ``path``."""
    directory = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        blob = a.tobytes()
        directory.append(
            {"name": name, "shape": list(a.shape), "offset": offset, "bytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "meta": meta,
        "tensors": directory,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n"
    with open(path, "wb") as f:
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_tensors(path):
    """Read (tensors, meta) back from a checkpoint file."""
    with open(path, "rb") as f:
        header = f.readline()
        try:
            manifest = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable manifest") from exc
        if manifest.get("format") != FORMAT_NAME:
            raise CheckpointError(f"{path}: not a {FORMAT_NAME} file")
        if manifest.get("version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: format version {manifest.get('version')} unsupported"
            )
        data = f.read()
    tensors = {}
    for entry in manifest["tensors"]:
        start = entry["offset"]
        stop = start + entry["bytes"]
        if stop > len(data):
            raise CheckpointError(f"{path}: truncated buffer for tensor {entry['name']}")
        buf = np.frombuffer(data[start:stop], dtype="<f8")
        tensors[entry["name"]] = buf.reshape(entry["shape"]).astype(np.float64, copy=True)
    return tensors, manifest["meta"]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# model parameter (de)serialization
# ---------------------------------------------------------------------------


def params_to_tensors(params) -> dict:
    out = {name: arr.data for name, arr in params.named_parameters().items()}
    if params.label_prior is not None:
        out["label_prior"] = params.label_prior
    return out


def save_params(path, params, extra_meta: dict | None = None) -> None:
    meta = {"kind": "model-params", "model": params.config.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    save_tensors(path, params_to_tensors(params), meta)


def load_params(path):
    """Rebuild LahstParams from a checkpoint; returns (params, meta)."""
    from lahst.model import ModelConfig, init_params

    tensors, meta = load_tensors(path)
    if meta.get("kind") not in ("model-params", "train-state"):
        raise CheckpointError(f"{path}: unexpected checkpoint kind {meta.get('kind')!r}")
    config = ModelConfig.from_dict(meta["model"])
    params = init_params(config, seed=0)
    prefix = "params." if meta.get("kind") == "train-state" else ""
    named = params.named_parameters()
    for name, arr in named.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"{path}: missing tensor {key}")
        stored = tensors[key]
        if tuple(stored.shape) != arr.shape:
            raise CheckpointError(
                f"{path}: tensor {key} has shape {tuple(stored.shape)}, expected {arr.shape}"
            )
        arr.data = np.ascontiguousarray(stored)
        arr.grad = None
    prior_key = prefix + "label_prior" if prefix else "label_prior"
    if prior_key in tensors:
        params.label_prior = tensors[prior_key]
    return params, meta
