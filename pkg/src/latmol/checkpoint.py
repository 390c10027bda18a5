"""Binary checkpoint container: named float64 tensors plus JSON metadata.

Byte layout (all integers little-endian; see docs/FORMATS.md):

    magic      8 bytes   b"LMCHKPT\\x00"
    version    uint32    currently 1
    meta_len   uint32
    metadata   meta_len bytes of UTF-8 JSON
    n_tensors  uint32
    per tensor:
        name_len   uint16
        name       UTF-8
        ndim       uint8
        dims       ndim * uint32
        data       prod(dims) float64, row-major

Tensors round-trip bitwise; a wrong magic or version fails before any
tensor bytes are read.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"LMCHKPT\x00"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, named_values, metadata):
    """Write tensors (dict name -> float64 ndarray) and a metadata dict."""
    meta = json.dumps(metadata, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(named_values)))
        for name in sorted(named_values):
            arr = np.ascontiguousarray(named_values[name], dtype="<f8")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def _read(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path):
    """Read back (named_values, metadata); validates header first."""
    with open(path, "rb") as fh:
        if _read(fh, 8, "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", _read(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version} (expected {VERSION})"
            )
        (meta_len,) = struct.unpack("<I", _read(fh, 4, "metadata length"))
        metadata = json.loads(_read(fh, meta_len, "metadata").decode())
        (count,) = struct.unpack("<I", _read(fh, 4, "tensor count"))
        named = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2, "name length"))
            name = _read(fh, name_len, "name").decode()
            (ndim,) = struct.unpack("<B", _read(fh, 1, "ndim"))
            dims = tuple(
                struct.unpack("<I", _read(fh, 4, "dim"))[0] for _ in range(ndim)
            )
            n_bytes = 8 * int(np.prod(dims, dtype=np.int64)) if dims else 8
            data = _read(fh, n_bytes, f"tensor '{name}'")
            named[name] = np.frombuffer(data, dtype="<f8").reshape(dims).copy()
        return named, metadata


def assign_parameters(structure, named_values, prefix):
    """Load saved arrays into the parameter tensors of ``structure``."""
    from .egnn import named_parameters

    for name, tensor in named_parameters(structure, prefix).items():
        if name not in named_values:
            raise CheckpointError(f"checkpoint is missing tensor '{name}'")
        saved = named_values[name]
        if saved.shape != tensor.values.shape:
            raise CheckpointError(
                f"tensor '{name}': saved shape {saved.shape} != model shape "
                f"{tensor.values.shape}"
            )
        tensor.values = saved.copy()
