"""Binary checkpoint format for named parameter tensors.

Layout (all integers unsigned 64-bit little-endian):

    magic   8 bytes  ``MCCECKPT``
    version 1 byte
    dtype   1 byte   4 (float32) or 8 (float64)
    per tensor, in sorted name order:
        name length, name (UTF-8), rank, dims..., payload (little-endian
        IEEE-754, C order)

Round-trips are bit-exact. float32 is the default payload; float64 is used
when the determinism / gradient-check flag is on.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"MCCECKPT"
VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], float64: bool = False) -> None:
    width = 8 if float64 else 4
    dtype = "<f8" if float64 else "<f4"
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION, width]))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype=dtype)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read tensors in stored dtype; callers upcast for training."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        head = fh.read(2)
        if len(head) != 2 or head[0] != VERSION:
            raise CheckpointError(f"{path}: unsupported version")
        width = head[1]
        if width not in (4, 8):
            raise CheckpointError(f"{path}: bad payload width {width}")
        dtype = np.dtype("<f8" if width == 8 else "<f4")
        params: dict[str, np.ndarray] = {}
        while True:
            raw = fh.read(8)
            if not raw:
                break
            if len(raw) != 8:
                raise CheckpointError(f"{path}: truncated tensor header")
            (name_len,) = struct.unpack("<Q", raw)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<Q", fh.read(8))
            shape = tuple(
                struct.unpack("<Q", fh.read(8))[0] for _ in range(rank)
            )
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(count * width)
            if len(payload) != count * width:
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            if name in params:
                raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
            params[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return params


def load_params_float64(path) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float64) for k, v in load_checkpoint(path).items()}
