"""Binary containers: images (PPM/PGM), bitstreams and checkpoints.

Bitstream v1, all integers big-endian::

    magic "MNIC" | version u8 = 1 | flags u8 (bit0: hard mask)
    width u16 | height u16 | latent channels u8 | lambda f32
    model hash u32 (FNV-1a of the checkpoint file) | payload length u32
    range-coder payload

Checkpoint v1, all integers little-endian::

    magic "MNCK" | version u8 = 1 | tensor count u32
    per tensor: name length u16, UTF-8 name, rank u8, dims u32 x rank,
                dtype u8 (0 = float64 LE), raw values
    config text length u32 | UTF-8 config text
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass

import numpy as np

BITSTREAM_MAGIC = b"MNIC"
BITSTREAM_VERSION = 1
FLAG_HARD_MASK = 0x01
_HEADER = struct.Struct(">4sBBHHBfII")
HEADER_BYTES = _HEADER.size

CHECKPOINT_MAGIC = b"MNCK"
CHECKPOINT_VERSION = 1
DTYPE_F64 = 0


class FormatError(ValueError):
    pass


def fnv1a32(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h ^= b
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


# ---------------------------------------------------------------------------
# bitstream
# ---------------------------------------------------------------------------


@dataclass
class Bitstream:
    width: int
    height: int
    channels: int
    lam: float
    model_hash: int
    payload: bytes
    hard_mask: bool = False
    version: int = BITSTREAM_VERSION

    def to_bytes(self) -> bytes:
        flags = FLAG_HARD_MASK if self.hard_mask else 0
        header = _HEADER.pack(
            BITSTREAM_MAGIC, self.version, flags, self.width, self.height,
            self.channels, self.lam, self.model_hash, len(self.payload),
        )
        return header + self.payload

    @classmethod
    def from_bytes(cls, data: bytes, expected_hash: int | None = None) -> "Bitstream":
        if len(data) < HEADER_BYTES:
            raise FormatError(f"bitstream too short for its {HEADER_BYTES}-byte header ({len(data)} bytes)")
        magic, version, flags, width, height, channels, lam, model_hash, length = _HEADER.unpack_from(data)
        if magic != BITSTREAM_MAGIC:
            raise FormatError(f"bad bitstream magic {magic!r}")
        if version != BITSTREAM_VERSION:
            raise FormatError(f"unsupported bitstream version {version}")
        if expected_hash is not None and model_hash != expected_hash:
            raise FormatError(
                f"bitstream was produced by model {model_hash:08x}, decoder has {expected_hash:08x}"
            )
        payload = data[HEADER_BYTES:]
        if len(payload) != length:
            raise FormatError(f"payload length field says {length} bytes, found {len(payload)}")
        return cls(width, height, channels, lam, model_hash, bytes(payload), bool(flags & FLAG_HARD_MASK), version)


def bpp_of(bitstream: bytes | int, width: int, height: int) -> float:
    """Bits per pixel of a whole file (header included)."""
    nbytes = bitstream if isinstance(bitstream, int) else len(bitstream)
    return nbytes * 8.0 / (width * height)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def save_tensors(tensors: dict[str, np.ndarray], config_text: str = "") -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", DTYPE_F64))
        parts.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    raw_config = config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(raw_config)))
    parts.append(raw_config)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_tensors(data: bytes) -> tuple[dict[str, np.ndarray], str]:
    r = _Reader(bytes(data))
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, count = r.unpack("<BI")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        (dtype,) = r.unpack("<B")
        if dtype != DTYPE_F64:
            raise FormatError(f"tensor {name!r}: unsupported dtype code {dtype}")
        n = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64)
        tensors[name] = values.reshape(dims)
    (text_len,) = r.unpack("<I")
    config_text = r.take(text_len).decode("utf-8")
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after checkpoint")
    return tensors, config_text


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------

_PNM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*([^\s#]+)")


def read_pnm(data: bytes) -> np.ndarray:
    """Parse binary P6/P5 (8-bit) into uint8 [H, W, 3] or [H, W]."""
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PNM_TOKEN.match(data, pos)
        if not m:
            raise FormatError("malformed PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"unsupported PNM type {magic!r}; only binary P6/P5")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise FormatError(f"only 8-bit PNM supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    raw = data[pos : pos + n]
    if len(raw) != n:
        raise FormatError(f"PNM pixel data truncated: expected {n} bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_pnm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise FormatError("PNM writer expects uint8 pixels")
    if pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    elif pixels.ndim == 2:
        magic = b"P5"
    else:
        raise FormatError(f"cannot write pixel array of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(pixels).tobytes()


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_pnm(fh.read())


def write_image(path, pixels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(write_pnm(pixels))


def to_unit(pixels: np.ndarray) -> np.ndarray:
    """uint8 [H,W,3] or [H,W] to float [3,H,W] in [0, 1]."""
    arr = np.asarray(pixels, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr.transpose(2, 0, 1)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """float [3,H,W] in [0, 1] to uint8 [H,W,3] (round half up after clipping)."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)


def pad_to_multiple(image: np.ndarray, factor: int) -> np.ndarray:
    """Edge-replicate [3,H,W] at bottom/right up to a multiple of ``factor``."""
    _, H, W = image.shape
    ph, pw = (-H) % factor, (-W) % factor
    if not (ph or pw):
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge")
