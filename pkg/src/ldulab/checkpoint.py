"""Binary checkpoint format (little-endian throughout).

::

    b"LDUL"                         magic
    u32 version                     = 1
    u8  has_schedule                0 or 1
      u16 len, utf-8 kind           schedule block (only when has_schedule)
      u32 T
      f64[T] beta
    u32 tensor count
    per tensor, names in lexicographic order:
      u16 len, utf-8 name
      u8  rank
      u64[rank] extents
      f64[prod(extents)] values
    u32 crc32 of every preceding byte

The header is validated before any tensor payload is read or allocated.
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, FormatError, UnsupportedVersion
from .schedule import NoiseSchedule
from .tensorcore import ParamStore

MAGIC = b"LDUL"
VERSION = 1


def encode(params: ParamStore, schedule: NoiseSchedule | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    if schedule is None:
        buf.write(struct.pack("<B", 0))
    else:
        kind = schedule.kind.encode("utf-8")
        buf.write(struct.pack("<BH", 1, len(kind)))
        buf.write(kind)
        buf.write(struct.pack("<I", schedule.T))
        buf.write(np.asarray(schedule.beta, dtype="<f8").tobytes())
    names = sorted(params.names())
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        value = np.asarray(params[name], dtype=np.float64)
        if value.ndim > 255:
            raise FormatError(f"tensor {name} has rank {value.ndim} > 255")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}Q", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CorruptCheckpoint(f"truncated checkpoint (need {n} bytes at offset {self.pos})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> tuple[ParamStore, NoiseSchedule | None]:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("not an LDUL file")
    r = _Reader(data)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersion(f"checkpoint version {version} (this build reads {VERSION})")
    if len(data) < 4 + 4 + 1 + 4 + 4:
        raise CorruptCheckpoint("truncated checkpoint header")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptCheckpoint("checksum mismatch")
    r.data = data[:-4]
    schedule = None
    (has_schedule,) = r.unpack("<B")
    if has_schedule not in (0, 1):
        raise CorruptCheckpoint(f"bad schedule flag {has_schedule}")
    if has_schedule:
        (n,) = r.unpack("<H")
        kind = r.take(n).decode("utf-8")
        (T,) = r.unpack("<I")
        beta = np.frombuffer(r.take(8 * T), dtype="<f8").astype(np.float64)
        schedule = NoiseSchedule(T, beta, kind)
    (count,) = r.unpack("<I")
    store = ParamStore()
    prev = None
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        if prev is not None and name <= prev:
            raise CorruptCheckpoint("tensor names out of order")
        prev = name
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        store[name] = values
    if r.pos != len(r.data):
        raise CorruptCheckpoint(f"{len(r.data) - r.pos} trailing bytes")
    return store, schedule


def save_checkpoint(path: str | Path, params: ParamStore, schedule: NoiseSchedule | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(encode(params, schedule))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, NoiseSchedule | None]:
    return decode(Path(path).read_bytes())
