"""Binary containers for tracing artifacts and model checkpoints.

Two on-disk formats live here:

``TRC1`` — tracing artifacts (bias matrix, codebook, owner basis, projection
matrix, trigger sets). Layout, all little-endian:

    magic   b"TRC1"
    version u16
    count   u16                      number of named blocks
    blocks  repeated:
        name_len u16, name utf-8
        kind     u8                  1 = float64 array, 2 = uint16 array
        ndim     u8
        dims     u32 * ndim
        payload  row-major, little-endian

``TFNN`` — model checkpoints:

    magic   b"TFNN"
    version u16
    layers  u16                      layer table follows
    per layer:
        type     u8                  1 = conv, 2 = dense
        ndim     u8
        dims     u32 * ndim          weight shape; bias length is dims[-1]
        weights  float32 row-major little-endian
        bias     float32 little-endian

Both formats reject wrong magics and truncated files with ``ContainerError``.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

TRC_MAGIC = b"TRC1"
TFNN_MAGIC = b"TFNN"
TRC_VERSION = 1
TFNN_VERSION = 1

_KIND_F64 = 1
_KIND_U16 = 2


class ContainerError(ValueError):
    """Malformed or mismatched container file."""


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContainerError(f"truncated container: wanted {n} bytes, got {len(buf)}")
    return buf


def save_trc(path, blocks: Mapping[str, np.ndarray]) -> None:
    """Write named arrays to a TRC1 file.

    float arrays are stored as float64, integer arrays as uint16 (label
    alphabet and owner counts both fit comfortably).
    """
    with open(path, "wb") as fh:
        fh.write(TRC_MAGIC)
        fh.write(struct.pack("<HH", TRC_VERSION, len(blocks)))
        for name, arr in blocks.items():
            arr = np.asarray(arr)
            if np.issubdtype(arr.dtype, np.integer):
                kind, out = _KIND_U16, arr.astype("<u2")
            else:
                kind, out = _KIND_F64, arr.astype("<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", kind, out.ndim))
            fh.write(struct.pack(f"<{out.ndim}I", *out.shape))
            fh.write(out.tobytes(order="C"))


def load_trc(path) -> dict[str, np.ndarray]:
    """Read a TRC1 file back into a dict of arrays."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != TRC_MAGIC:
            raise ContainerError(f"{path}: not a TRC1 container")
        version, count = struct.unpack("<HH", _read_exact(fh, 4))
        if version != TRC_VERSION:
            raise ContainerError(f"{path}: unsupported TRC version {version}")
        blocks: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            kind, ndim = struct.unpack("<BB", _read_exact(fh, 2))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            n = int(np.prod(dims, dtype=np.int64)) if dims else 1
            if kind == _KIND_F64:
                dt, size = np.dtype("<f8"), 8
            elif kind == _KIND_U16:
                dt, size = np.dtype("<u2"), 2
            else:
                raise ContainerError(f"{path}: unknown block kind {kind}")
            data = np.frombuffer(_read_exact(fh, n * size), dtype=dt)
            blocks[name] = data.reshape(dims).copy()
        return blocks


_LAYER_CODES = {"conv": 1, "dense": 2}
_LAYER_NAMES = {v: k for k, v in _LAYER_CODES.items()}


def save_tfnn(path, layers: list[tuple[str, np.ndarray, np.ndarray]]) -> None:
    """Write a checkpoint: list of (layer kind, weights, bias)."""
    with open(path, "wb") as fh:
        fh.write(TFNN_MAGIC)
        fh.write(struct.pack("<HH", TFNN_VERSION, len(layers)))
        for kind, w, b in layers:
            w32 = np.asarray(w, dtype="<f4")
            b32 = np.asarray(b, dtype="<f4")
            fh.write(struct.pack("<BB", _LAYER_CODES[kind], w32.ndim))
            fh.write(struct.pack(f"<{w32.ndim}I", *w32.shape))
            fh.write(w32.tobytes(order="C"))
            fh.write(b32.tobytes(order="C"))


def load_tfnn(path) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Read a checkpoint written by :func:`save_tfnn`."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != TFNN_MAGIC:
            raise ContainerError(f"{path}: not a TFNN checkpoint")
        version, n_layers = struct.unpack("<HH", _read_exact(fh, 4))
        if version != TFNN_VERSION:
            raise ContainerError(f"{path}: unsupported TFNN version {version}")
        layers = []
        for _ in range(n_layers):
            code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
            if code not in _LAYER_NAMES:
                raise ContainerError(f"{path}: unknown layer code {code}")
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            n = int(np.prod(dims, dtype=np.int64))
            w = np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4").reshape(dims).copy()
            b = np.frombuffer(_read_exact(fh, 4 * dims[-1]), dtype="<f4").copy()
            layers.append((_LAYER_NAMES[code], w, b))
        return layers


def dump_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")
