"""Binary checkpoint format.

Layout, all integers little-endian::

    b"MECM" | u32 version | u64 payload length | payload | u32 crc32(payload)

The payload holds a u32-length-prefixed JSON model config, a u32 tensor count,
then per tensor: u32 name length, UTF-8 name, u8 dtype code (1 = float32),
u8 rank, rank x u32 dims and the raw little-endian data.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import BadMagic, CheckpointError, CRCMismatch, MissingFileError, TruncatedCheckpoint, UnsupportedVersion
from .model import Model, ModelConfig, build

MAGIC = b"MECM"
VERSION = 1
_DTYPES = {1: np.dtype("<f4")}
_CODES = {v: k for k, v in _DTYPES.items()}
_PREFIX = struct.Struct("<4sIQ")


def to_bytes(model: Model) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [struct.pack("<I", len(cfg)), cfg]
    state = model.state()
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[1])
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    return _PREFIX.pack(MAGIC, VERSION, len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("payload field runs past its declared length")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))


def from_bytes(buf: bytes) -> Model:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(f"not a checkpoint: magic {buf[:4]!r}")
    if len(buf) < _PREFIX.size:
        raise TruncatedCheckpoint("file ends inside the header")
    _, version, length = _PREFIX.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersion(f"checkpoint version {version} not supported (expected {VERSION})")
    end = _PREFIX.size + length
    if len(buf) < end + 4:
        raise TruncatedCheckpoint(f"expected {end + 4} bytes, file has {len(buf)}")
    payload = buf[_PREFIX.size:end]
    (crc,) = struct.unpack_from("<I", buf, end)
    if zlib.crc32(payload) != crc:
        raise CRCMismatch("checkpoint CRC mismatch: file is corrupted")
    r = _Reader(payload)
    (cfg_len,) = r.unpack("I")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(cfg_len).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad model config in checkpoint: {exc}") from exc
    (count,) = r.unpack("I")
    state = {}
    for _ in range(count):
        (name_len,) = r.unpack("I")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"{rank}I")
        dt = _DTYPES[code]
        data = r.take(int(np.prod(dims, dtype=np.int64)) * dt.itemsize)
        state[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(np.float32)
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes after the last tensor")
    model = build(config, seed=0)
    model.load_state(state)
    return model


def save(model: Model, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path) -> Model:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes())
