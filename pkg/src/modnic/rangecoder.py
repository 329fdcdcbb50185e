"""Carry-propagating range coder over static integer CDF tables.

State is a 32-bit ``low`` window (held in a 64-bit integer so a carry out of
bit 31 can be detected) and a 32-bit ``range``.  After each symbol the coder
shifts out one byte at a time while ``range < 2**24``; a carry rewrites the
already emitted bytes.  ``finish`` writes the 4 bytes of ``low``, which is
exactly what the decoder consumes, so a valid stream is read to its last byte.

Latent symbols are serialized channel-major, then row-major within a channel.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .density import QuantizedCdfTable

TOP = 1 << 24
MASK32 = (1 << 32) - 1
FLUSH_BYTES = 4

# decoder status codes
_OK = 0
_TRUNCATED = 1
_BAD_TARGET = 2


class RangeCoderError(ValueError):
    pass


@njit(cache=True)
def _encode_kernel(idx, rows, cdf, precision):
    n = idx.shape[0]
    out = np.zeros(n * (precision // 8 + 2) + 8, dtype=np.uint8)
    pos = 0
    low = np.int64(0)
    rng = np.int64(0xFFFFFFFF)
    for i in range(n):
        row = rows[i]
        s = idx[i]
        start = cdf[row, s]
        freq = cdf[row, s + 1] - start
        r = rng >> precision
        low += r * start
        rng = r * freq
        if low > 0xFFFFFFFF:
            low -= np.int64(1) << 32
            j = pos - 1
            while out[j] == 255:
                out[j] = 0
                j -= 1
            out[j] += 1
        while rng < TOP:
            out[pos] = (low >> 24) & 0xFF
            pos += 1
            low = (low << 8) & 0xFFFFFFFF
            rng <<= 8
    for _ in range(4):
        out[pos] = (low >> 24) & 0xFF
        pos += 1
        low = (low << 8) & 0xFFFFFFFF
    return out[:pos]


@njit(cache=True)
def _decode_kernel(buf, rows, cdf, precision, out):
    n = rows.shape[0]
    nbytes = buf.shape[0]
    width = cdf.shape[1]
    if nbytes < 4:
        return _TRUNCATED, nbytes, 0
    code = np.int64(0)
    for k in range(4):
        code = (code << 8) | np.int64(buf[k])
    pos = 4
    rng = np.int64(0xFFFFFFFF)
    total = np.int64(1) << precision
    for i in range(n):
        row = rows[i]
        r = rng >> precision
        target = code // r
        if target >= total:
            return _BAD_TARGET, pos, i
        lo = 0
        hi = width - 1
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if cdf[row, mid] <= target:
                lo = mid
            else:
                hi = mid
        s = lo
        start = cdf[row, s]
        freq = cdf[row, s + 1] - start
        code -= r * start
        rng = r * freq
        while rng < TOP:
            if pos >= nbytes:
                return _TRUNCATED, pos, i
            code = ((code << 8) | np.int64(buf[pos])) & 0xFFFFFFFF
            pos += 1
            rng <<= 8
        out[i] = s
    return _OK, pos, n


def _check_cdf(cdf: np.ndarray, precision: int) -> np.ndarray:
    cdf = np.ascontiguousarray(cdf, dtype=np.int64)
    if cdf.ndim != 2 or cdf.shape[1] < 2:
        raise ValueError(f"cdf table must be 2-d with >= 2 boundaries, got {cdf.shape}")
    if not 1 <= precision <= 16:
        raise ValueError(f"precision {precision} outside [1, 16]")
    if np.any(cdf[:, 0] != 0) or np.any(cdf[:, -1] != 1 << precision):
        raise ValueError("cdf rows must start at 0 and end at 2**precision")
    if np.any(np.diff(cdf, axis=1) < 0):
        raise ValueError("cdf rows must be nondecreasing")
    return cdf


def encode_indices(idx, rows, cdf, precision: int) -> bytes:
    """Encode 0-based symbol indices; symbol i uses table row ``rows[i]``."""
    cdf = _check_cdf(cdf, precision)
    idx = np.ascontiguousarray(idx, dtype=np.int64).ravel()
    rows = np.ascontiguousarray(rows, dtype=np.int64).ravel()
    if idx.shape != rows.shape:
        raise ValueError("idx and rows must have the same length")
    if idx.size:
        if rows.min() < 0 or rows.max() >= cdf.shape[0]:
            raise ValueError("table row index out of range")
        if idx.min() < 0 or idx.max() >= cdf.shape[1] - 1:
            raise RangeCoderError("symbol outside table support")
        if np.any(cdf[rows, idx + 1] == cdf[rows, idx]):
            raise RangeCoderError("symbol has zero frequency in its table")
    return _encode_kernel(idx, rows, cdf, precision).tobytes()


def decode_indices(data: bytes, rows, cdf, precision: int) -> np.ndarray:
    cdf = _check_cdf(cdf, precision)
    rows = np.ascontiguousarray(rows, dtype=np.int64).ravel()
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    out = np.empty(rows.size, dtype=np.int64)
    status, pos, count = _decode_kernel(buf, rows, cdf, precision, out)
    if status == _TRUNCATED:
        raise RangeCoderError(
            f"truncated stream: needed byte {pos} of {len(buf)} while decoding symbol {count}"
        )
    if status == _BAD_TARGET:
        raise RangeCoderError(f"corrupt stream at byte {pos} (symbol {count})")
    if pos != len(buf):
        raise RangeCoderError(f"stream has {len(buf) - pos} unread trailing byte(s) after {rows.size} symbols")
    return out


def _channel_rows(shape) -> np.ndarray:
    N, H, W = shape
    return np.repeat(np.arange(N, dtype=np.int64), H * W)


def encode(symbols, tables: QuantizedCdfTable) -> bytes:
    """Encode integer latents [N, H, W] with the per-channel tables."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.ndim != 3 or symbols.shape[0] != tables.channels:
        raise ValueError(f"symbols {symbols.shape} do not match {tables.channels} table channels")
    L = tables.support
    if symbols.size and np.abs(symbols).max() > L:
        raise RangeCoderError(f"symbol outside support [-{L}, {L}]")
    return encode_indices(symbols.ravel() + L, _channel_rows(symbols.shape), tables.cdf, tables.precision)


def decode(data: bytes, shape, tables: QuantizedCdfTable) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or shape[0] != tables.channels:
        raise ValueError(f"latent shape {shape} does not match {tables.channels} table channels")
    idx = decode_indices(data, _channel_rows(shape), tables.cdf, tables.precision)
    return (idx - tables.support).reshape(shape)


def ideal_bits(idx, rows, cdf, precision: int) -> float:
    """Sum of -log2 p_table over a symbol sequence."""
    cdf = np.asarray(cdf, dtype=np.int64)
    idx = np.asarray(idx, dtype=np.int64).ravel()
    rows = np.asarray(rows, dtype=np.int64).ravel()
    freq = cdf[rows, idx + 1] - cdf[rows, idx]
    return float(np.sum(precision - np.log2(freq)))
