"""MOTN tensor files and checkpoint directories.

Tensor file layout (little-endian)::

    b"MOTN" | version u8 = 1 | dtype u8 (0 = f32, 1 = f64) | ndim u8 | reserved u8 = 0
    | ndim x u64 dims | row-major payload
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"MOTN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFormatError(ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


def encode_tensor(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.dtype not in _CODES:
        raise UnsupportedDtypeError(f"only float32/float64 can be written, got {arr.dtype}")
    if any(d == 0 for d in arr.shape):
        raise ValueError(f"refusing to write empty tensor of shape {arr.shape}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    header = MAGIC + struct.pack("<BBBB", VERSION, _CODES[arr.dtype], arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes(order="C")
    return header + payload


def decode_tensor(buf: bytes, source: str = "<bytes>") -> Tensor:
    if len(buf) < 8:
        raise TruncatedPayloadError(f"{source}: file shorter than the 8-byte header")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    version, code, ndim, _reserved = struct.unpack("<BBBB", buf[4:8])
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported version {version}")
    if code not in _DTYPES:
        raise UnsupportedDtypeError(f"{source}: unsupported dtype code {code}")
    dims_end = 8 + 8 * ndim
    if len(buf) < dims_end:
        raise TruncatedPayloadError(f"{source}: header truncated")
    shape = struct.unpack(f"<{ndim}Q", buf[8:dims_end])
    dt = _DTYPES[code]
    need = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    have = len(buf) - dims_end
    if have < need:
        raise TruncatedPayloadError(f"{source}: payload has {have} bytes, expected {need}")
    if have > need:
        raise TensorFormatError(f"{source}: {have - need} trailing bytes after payload")
    arr = np.frombuffer(buf, dtype=dt, count=need // dt.itemsize, offset=dims_end).reshape(shape)
    return Tensor(arr.astype(dt.newbyteorder("="), copy=True))


def write_tensor(path, t) -> None:
    path = Path(path)
    data = encode_tensor(t)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"cannot write tensor to {path}: {exc}") from exc


def read_tensor(path) -> Tensor:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor from {path}: {exc}") from exc
    return decode_tensor(buf, str(path))


def array_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(encode_tensor(np.asarray(arr))).hexdigest()


def save_checkpoint(directory, tensors: Mapping[str, np.ndarray], step: int = 0, meta: dict | None = None) -> Path:
    """Write each array as ``<name>.motn`` plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        fname = f"{name}.motn"
        write_tensor(directory / fname, arr)
        entries.append({"name": name, "file": fname, "shape": list(arr.shape), "dtype": str(arr.dtype)})
    manifest = {"format": "moalign-checkpoint", "version": 1, "step": int(step), "tensors": entries, "meta": meta or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    out = {}
    for e in manifest["tensors"]:
        arr = read_tensor(directory / e["file"]).data
        if list(arr.shape) != e["shape"]:
            raise TensorFormatError(f"{e['file']}: shape {arr.shape} disagrees with manifest {e['shape']}")
        out[e["name"]] = arr
    return out, manifest


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
