"""The OWFS checkpoint container.

Layout (all integers little-endian):

    magic            4 bytes  b"OWFS"
    format version   u32      currently 1
    entry count      u32
    per entry (sorted by name):
        name length  u32
        name         UTF-8 bytes
        dtype tag    u8       0 = float64
        rank         u8
        dims         rank x u32
        payload      little-endian float64, C order
    config length    u32
    config           UTF-8 text (the resolved run configuration)

Model arrays are stored under ``model/`` (parameters, batch-norm running
statistics, the trainable null sigma, and the normalization statistics of
the training data); optimizer state goes under ``opt/``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"OWFS"
FORMAT_VERSION = 1
DTYPE_F64 = 0


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, config_text: str = "") -> None:
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION),
           struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8", order="C")
        name_bytes = name.encode("utf-8")
        out.append(struct.pack("<I", len(name_bytes)))
        out.append(name_bytes)
        out.append(struct.pack("<BB", DTYPE_F64, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    cfg_bytes = config_text.encode("utf-8")
    out.append(struct.pack("<I", len(cfg_bytes)))
    out.append(cfg_bytes)
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def load_checkpoint(path):
    """Returns (arrays dict, config text)."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an OWFS checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {version}, "
            f"expected {FORMAT_VERSION}"
        )
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        tag = r.u8()
        if tag != DTYPE_F64:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        rank = r.u8()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = r.take(8 * count)
        arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    config_text = r.take(r.u32()).decode("utf-8")
    return arrays, config_text


def inspect_checkpoint(path):
    """Returns ([(name, shape)], config text) without copying payloads."""
    arrays, config_text = load_checkpoint(path)
    entries = [(name, arrays[name].shape) for name in sorted(arrays)]
    return entries, config_text
