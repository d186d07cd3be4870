"""On-disk formats: parameter checkpoints and descriptor dumps.

Checkpoint layout: magic, version, a JSON header with the model config,
then a flat archive of named tensors (UTF-8 name, shape, raw little-endian
scalars). Descriptor dumps: magic, version, count, dim, precision, then
row-major little-endian vectors.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

CKPT_MAGIC = b"LGCNCKPT"
DESC_MAGIC = b"LGCNDESC"
CKPT_VERSION = 1
DESC_VERSION = 1

_DTYPE_CODES = {0: "<f8", 1: "<f4"}
_DTYPE_FOR = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class CheckpointError(ValueError):
    """Raised for malformed checkpoint or descriptor files."""


def save_checkpoint(path, params: dict, header: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(struct.pack("<Q", len(params)))
        for name, value in params.items():
            arr = np.ascontiguousarray(value)
            if arr.dtype not in _DTYPE_FOR:
                arr = arr.astype(np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", _DTYPE_FOR[arr.dtype]))
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.astype(_DTYPE_CODES[_DTYPE_FOR[arr.dtype]]).tobytes())


def load_checkpoint(path):
    """Returns (params dict, header dict)."""
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        (count,) = struct.unpack("<Q", fh.read(8))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            (code,) = struct.unpack("<B", fh.read(1))
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            dtype = np.dtype(_DTYPE_CODES[code])
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(n * dtype.itemsize)
            if len(raw) != n * dtype.itemsize:
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            data = np.frombuffer(raw, dtype=dtype)
            params[name] = data.reshape(shape).astype(dtype.newbyteorder("="))
        return params, header


def group_sha256(params: dict, prefix: str = "") -> str:
    """Stable digest of every parameter whose name starts with prefix."""
    h = hashlib.sha256()
    for name in sorted(params):
        if not name.startswith(prefix):
            continue
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.astype("<f8").tobytes())
    return h.hexdigest()


def save_descriptors(path, vectors: np.ndarray, precision: int = 8) -> None:
    if precision not in (4, 8):
        raise CheckpointError("precision must be 4 or 8 bytes per scalar")
    arr = np.ascontiguousarray(vectors)
    if arr.ndim != 2:
        raise CheckpointError("descriptor dump expects a (count, dim) array")
    dtype = "<f8" if precision == 8 else "<f4"
    with open(path, "wb") as fh:
        fh.write(DESC_MAGIC)
        fh.write(struct.pack("<I", DESC_VERSION))
        fh.write(struct.pack("<Q", arr.shape[0]))
        fh.write(struct.pack("<Q", arr.shape[1]))
        fh.write(struct.pack("<B", precision))
        fh.write(arr.astype(dtype).tobytes())


def load_descriptors(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != DESC_MAGIC:
            raise CheckpointError(f"{path}: not a descriptor dump")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != DESC_VERSION:
            raise CheckpointError(f"{path}: unsupported descriptor version {version}")
        (count,) = struct.unpack("<Q", fh.read(8))
        (dim,) = struct.unpack("<Q", fh.read(8))
        (precision,) = struct.unpack("<B", fh.read(1))
        dtype = np.dtype("<f8" if precision == 8 else "<f4")
        data = np.frombuffer(fh.read(count * dim * dtype.itemsize), dtype=dtype)
        if data.size != count * dim:
            raise CheckpointError(f"{path}: truncated descriptor data")
        return data.reshape(count, dim).astype(dtype.newbyteorder("="))
