"""Little-endian binary container shared by checkpoints and raw datasets.

Layout::

    b"AVAE"  u32 version
    u32 len  utf-8 descriptor
    u32 count
    count x ( u32 len  utf-8 name | u32 rank | u32 dims[rank] | f64 data[prod(dims)] )
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"AVAE"
VERSION = 1


class FormatError(ValueError):
    """Malformed binary tensor file; ``offset`` is where parsing stopped."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def dumps(descriptor: str, tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    desc = descriptor.encode("utf-8")
    parts += [struct.pack("<I", len(desc)), desc, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left",
                              self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what: str) -> str:
        n = self.u32(f"{what} length")
        at = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not valid UTF-8", at) from None


def loads(buf: bytes) -> tuple[str, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'AVAE'", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    descriptor = r.text("descriptor")
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.text("tensor name")
        rank = r.u32(f"rank of {name!r}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name!r}"))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(8 * n, f"data of {name!r}"), dtype="<f8")
        tensors[name] = data.astype(np.float64).reshape(dims)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return descriptor, tensors


def save(path, descriptor: str, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(descriptor, tensors))


def load(path) -> tuple[str, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
