"""Deterministic synthetic images standing in for natural-image patches."""

from __future__ import annotations

import numpy as np

KINDS = ("blobs", "gradients", "checker", "bandnoise")


def _rng(seed: int, index: int, kind: str) -> np.random.Generator:
    salt = KINDS.index(kind) if kind in KINDS else len(KINDS)
    return np.random.default_rng([seed, index, salt])


def _blobs(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.ones((size, size, 3)) * rng.uniform(0, 255, 3)
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, size, 2)
        sigma = rng.uniform(size / 10, size / 3)
        weight = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))[:, :, None]
        img = img * (1 - weight) + weight * rng.uniform(0, 255, 3)
    return img


def _gradients(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    t = np.cos(theta) * xx + np.sin(theta) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    a, b = rng.uniform(0, 255, 3), rng.uniform(0, 255, 3)
    return a + t[:, :, None] * (b - a)


def _checker(rng, size):
    cell = int(rng.choice([2, 4, 8, 16]))
    oy, ox = rng.integers(0, cell, 2)
    yy, xx = np.mgrid[0:size, 0:size]
    parity = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(bool)
    a = rng.integers(0, 256, 3)
    b = rng.integers(0, 256, 3)
    while np.array_equal(a, b):
        b = rng.integers(0, 256, 3)
    return np.where(parity[:, :, None], a, b).astype(np.float64)


def _bandnoise(rng, size):
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    radius = np.hypot(fy, fx)
    lo = rng.uniform(0.02, 0.1)
    hi = lo + rng.uniform(0.05, 0.25)
    band = ((radius >= lo) & (radius <= hi)).astype(np.float64)
    out = np.empty((size, size, 3))
    for c in range(3):
        field = np.real(np.fft.ifft2(np.fft.fft2(rng.standard_normal((size, size))) * band))
        field /= max(field.std(), 1e-12)
        out[:, :, c] = 128.0 + 40.0 * field
    return out


_MAKERS = {"blobs": _blobs, "gradients": _gradients, "checker": _checker, "bandnoise": _bandnoise}


def parse_kinds(kind: str) -> tuple[str, ...]:
    """``"mixed"`` means every kind; ``"a+b"`` cycles through the listed kinds."""
    kinds = KINDS if kind == "mixed" else tuple(kind.split("+"))
    for k in kinds:
        if k not in _MAKERS:
            raise ValueError(f"unknown kind {k!r}; choose from {KINDS + ('mixed',)} or join kinds with '+'")
    return kinds


def generate(kind: str, count: int, size: int, seed: int) -> np.ndarray:
    """uint8 images [count, size, size, 3]; multi-kind sets cycle through the kinds."""
    if size % 16:
        raise ValueError(f"image size {size} must be divisible by 16")
    kinds = parse_kinds(kind)
    out = np.empty((count, size, size, 3), dtype=np.uint8)
    for i in range(count):
        k = kinds[i % len(kinds)]
        img = _MAKERS[k](_rng(seed, i, k), size)
        out[i] = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    return out


def as_unit_batch(images: np.ndarray) -> np.ndarray:
    """uint8 [n,H,W,3] to float [n,3,H,W] in [0, 1]."""
    return np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2) / 255.0
