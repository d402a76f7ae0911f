"""Weight archive (``.nsw``) reading and writing.

Byte layout::

    offset 0   4 bytes   magic b"NSW1"
    offset 4   8 bytes   header length L, unsigned little-endian
    offset 12  L bytes   UTF-8 JSON header
    offset 12+L          payload: raw little-endian tensor bytes, concatenated

The header is ``{"version": 1, "tensors": [{"name", "dtype", "shape",
"offset", "nbytes"}, ...]}`` serialized with sorted keys and no whitespace.
``offset`` is relative to the start of the payload and ``dtype`` is a numpy
little-endian type string (``"<f4"`` or ``"<f8"``). Tensors appear in model
parameter order, which makes save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Model

MAGIC = b"NSW1"
VERSION = 1
FEATURES_NAME = "features"


class ArchiveError(ValueError):
    pass


class ArchiveVersionError(ArchiveError):
    pass


class MissingTensorError(ArchiveError):
    pass


class UnexpectedTensorError(ArchiveError):
    pass


class TensorShapeError(ArchiveError):
    pass


def write_archive(path, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.kind != "f":
            raise ArchiveError(f"{name}: only float tensors are archived, got {arr.dtype}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str,
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise ArchiveError("tensor names must be unique")
    header = json.dumps({"version": VERSION, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    return path


def read_archive(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ArchiveError(f"{path}: not a weight archive (bad magic {blob[:4]!r})")
    (hlen,) = struct.unpack("<Q", blob[4:12])
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise ArchiveVersionError(f"{path}: archive version {header.get('version')} "
                                  f"is not supported (expected {VERSION})")
    payload = memoryview(blob)[12 + hlen:]
    out = {}
    for e in header["tensors"]:
        if e["name"] in out:
            raise ArchiveError(f"{path}: duplicate tensor {e['name']!r}")
        dtype = np.dtype(e["dtype"])
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ArchiveError(f"{path}: truncated payload for {e['name']!r}")
        out[e["name"]] = np.frombuffer(raw, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))
    return out


def save_weights(model: Model, path) -> Path:
    return write_archive(path, model.state())


def load_weights(model: Model, path) -> Model:
    """Load archived weights into ``model`` after validating names and shapes."""
    tensors = read_archive(path)
    missing = [k for k in model.params if k not in tensors]
    if missing:
        raise MissingTensorError(f"archive lacks tensor(s): {', '.join(missing)}")
    extra = [k for k in tensors if k not in model.params]
    if extra:
        raise UnexpectedTensorError(f"archive has unknown tensor(s): {', '.join(extra)}")
    for name, arr in tensors.items():
        want = model.params[name].shape
        if arr.shape != want:
            raise TensorShapeError(f"tensor {name!r}: archive shape {arr.shape}, model expects {want}")
    model.load_state(tensors)
    return model


def save_features(path, features: np.ndarray) -> Path:
    return write_archive(path, {FEATURES_NAME: features})


def import_features(path, expected_channels: int | None = None) -> np.ndarray:
    """Read precomputed stem features ``[N, C, h, w]`` to feed a precomputed-stem model."""
    tensors = read_archive(path)
    if FEATURES_NAME in tensors:
        feats = tensors[FEATURES_NAME]
    elif len(tensors) == 1:
        feats = next(iter(tensors.values()))
    else:
        raise ArchiveError(f"{path}: expected a single {FEATURES_NAME!r} tensor")
    if feats.ndim != 4:
        raise TensorShapeError(f"features must be [N,C,h,w], got {feats.shape}")
    if expected_channels is not None and feats.shape[1] != expected_channels:
        raise TensorShapeError(f"features have {feats.shape[1]} channels, "
                               f"model expects {expected_channels}")
    return feats
