"""Flat binary checkpoint format shared by every model in the package.

Layout (little endian)::

    magic   4 bytes  b"DGER"
    version u32
    count   u32
    count x { name_len u16, name utf-8, ndim u8, dims u32 * ndim }
    count x row-major float64 blocks, in table order
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DGER"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(blocks: Mapping[str, np.ndarray]) -> bytes:
    header = [MAGIC, struct.pack("<II", VERSION, len(blocks))]
    body = []
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        header.append(struct.pack("<H", len(raw)) + raw)
        header.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.append(arr.tobytes(order="C"))
    return b"".join(header + body)


def decode(data: bytes) -> dict[str, np.ndarray]:
    try:
        return _decode(data)
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None


def _decode(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    pos = 12
    table = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        table.append((name, shape))
    out = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        nbytes = 8 * size
        if pos + nbytes > len(data):
            raise CheckpointError("truncated checkpoint")
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(data):
        raise CheckpointError("trailing bytes after parameter blocks")
    return out


def save(path, blocks: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(blocks))
    tmp.replace(path)


def load(path) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return decode(p.read_bytes())
