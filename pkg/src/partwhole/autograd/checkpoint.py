"""Flat binary parameter container.

Layout (all integers little-endian u32)::

    b"HAPW" | version
    repeated until EOF:
        name_length | name (utf-8) | rank | dim_0 .. dim_{rank-1} | float32 payload (little-endian)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HAPW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_parameters(arrays: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.require(np.asarray(arr, dtype="<f4"), requirements="C")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode_parameters(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a parameter container (bad magic)")
    if len(blob) < 8:
        raise CheckpointError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            payload = blob[pos:pos + 4 * count]
            if len(payload) != 4 * count:
                raise CheckpointError(f"{name}: truncated payload")
            pos += 4 * count
            if name in out:
                raise CheckpointError(f"duplicate parameter name {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    except struct.error as exc:
        raise CheckpointError(f"truncated record at byte {pos}") from exc
    return out


def save_parameters(path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_parameters(arrays))


def load_parameters(path) -> dict[str, np.ndarray]:
    return decode_parameters(Path(path).read_bytes())
