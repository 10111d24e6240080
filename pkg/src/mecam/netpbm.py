"""Binary 8-bit PGM (P5) and PPM (P6) codecs."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import BadImageMagic, MissingFileError, NetpbmError, TruncatedImage, UnsupportedMaxval

_WHITESPACE = b" \t\r\n\v\f"


def _read_header(buf: bytes) -> tuple[bytes, int, int, int, int]:
    """Parse magic, width, height, maxval; return them and the payload offset."""
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise BadImageMagic(f"expected P5 or P6 magic, got {buf[:2]!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(buf):
            raise TruncatedImage("header ended early")
        ch = buf[pos:pos + 1]
        if ch in _WHITESPACE:
            pos += 1
        elif ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise TruncatedImage("unterminated comment in header")
            pos = end + 1
        else:
            start = pos
            while pos < len(buf) and buf[pos:pos + 1] not in _WHITESPACE and buf[pos:pos + 1] != b"#":
                pos += 1
            token = buf[start:pos]
            if not token.isdigit():
                raise NetpbmError(f"bad header token {token!r}")
            fields.append(int(token))
    if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
        raise TruncatedImage("missing whitespace after maxval")
    width, height, maxval = fields
    if maxval != 255:
        raise UnsupportedMaxval(f"only maxval 255 is supported, got {maxval}")
    return buf[:2], width, height, maxval, pos + 1


def decode(buf: bytes) -> np.ndarray:
    """Decode to uint8: H x W for P5, H x W x 3 for P6."""
    magic, width, height, _, offset = _read_header(buf)
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = buf[offset:offset + need]
    if len(payload) < need:
        raise TruncatedImage(f"payload has {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(height, width) if channels == 1 else arr.reshape(height, width, 3)


def encode(pixels: np.ndarray) -> bytes:
    """Encode uint8 H x W (P5) or H x W x 3 (P6)."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise NetpbmError(f"expected uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"unsupported pixel array shape {pixels.shape}")
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


decode_pgm = decode_ppm = decode


def encode_pgm(pixels: np.ndarray) -> bytes:
    if np.asarray(pixels).ndim != 2:
        raise NetpbmError("PGM needs a single-channel H x W array")
    return encode(pixels)


def encode_ppm(pixels: np.ndarray) -> bytes:
    if np.asarray(pixels).ndim != 3:
        raise NetpbmError("PPM needs an H x W x 3 array")
    return encode(pixels)


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Quantise values in [0, 1] to bytes as round(255 * v)."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """Read a PGM/PPM as float32 C x H x W scaled to [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"image not found: {path}")
    arr = decode(path.read_bytes()).astype(np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1).copy()


def write_image(path, image: np.ndarray) -> None:
    """Write a [0, 1] image given as H x W or C x H x W (C in {1, 3})."""
    image = np.asarray(image)
    if image.ndim == 3:
        if image.shape[0] == 1:
            image = image[0]
        elif image.shape[0] == 3:
            image = image.transpose(1, 2, 0)
        else:
            raise NetpbmError(f"cannot write {image.shape[0]}-channel image")
    Path(path).write_bytes(encode(to_uint8(image)))
