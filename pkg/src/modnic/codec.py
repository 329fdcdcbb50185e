"""End-to-end image codec built from a checkpoint.

Encoding: pad, analyze, mask (when a ModNet is present), round, range-code.
Decoding needs no lambda: the masked integer latents are decoded and
synthesized directly, so the header's lambda is metadata only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rangecoder
from .checkpoint import checkpoint_to_bytes
from .formats import Bitstream, bpp_of, fnv1a32, pad_to_multiple
from .modnet import apply_mask, modnet_forward
from .trainer import Checkpoint
from .transforms import LatentCode, QuantStats, analyze, quantize_infer, synthesize, to_image


@dataclass
class EncodeResult:
    data: bytes
    reconstruction: np.ndarray  # [3, H, W], clamped to [0, 1]
    code: LatentCode
    lam: float

    @property
    def bpp(self) -> float:
        H, W = self.code.image_shape
        return bpp_of(self.data, W, H)


class Codec:
    def __init__(self, ckpt: Checkpoint, checkpoint_bytes: bytes | None = None):
        self.ckpt = ckpt
        if checkpoint_bytes is None:
            checkpoint_bytes = checkpoint_to_bytes(ckpt)
        self.model_hash = fnv1a32(checkpoint_bytes)
        cfg = ckpt.config
        self.support = cfg.support
        self.tables = ckpt.density.build_tables(cfg.support, cfg.precision)
        self.stats = QuantStats()

    @property
    def factor(self) -> int:
        return self.ckpt.transforms.downsampling

    @property
    def lambda_max(self) -> float:
        return float(self.ckpt.config.lambda_max)

    def latents(self, image: np.ndarray, lam: float, hard: bool = False) -> np.ndarray:
        x = pad_to_multiple(np.asarray(image, dtype=np.float64), self.factor)[None]
        y = analyze(self.ckpt.transforms, ad.constant(x))
        if self.ckpt.modnet is not None:
            mask = modnet_forward(self.ckpt.modnet, y, lam)
            y = apply_mask(y, mask, "hard" if hard else "soft")
        return y.data[0]

    def reconstruct(self, symbols: np.ndarray, height: int, width: int) -> np.ndarray:
        x_hat = synthesize(self.ckpt.transforms, ad.constant(symbols[None].astype(np.float64))).data[0]
        return to_image(x_hat[:, :height, :width])

    def encode(self, image: np.ndarray, lam: float, hard: bool = False) -> EncodeResult:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError(f"expected a [3,H,W] image, got {image.shape}")
        _, H, W = image.shape
        symbols = quantize_infer(self.latents(image, lam, hard), self.support, self.stats)
        code = LatentCode(symbols, (H, W), self.support)
        payload = rangecoder.encode(symbols, self.tables)
        stream = Bitstream(W, H, symbols.shape[0], float(lam), self.model_hash, payload, hard)
        return EncodeResult(stream.to_bytes(), self.reconstruct(symbols, H, W), code, float(lam))

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        f = self.factor
        return (self.ckpt.transforms.latent_channels, -(-height // f), -(-width // f))

    def decode(self, data: bytes) -> np.ndarray:
        stream = Bitstream.from_bytes(data, expected_hash=self.model_hash)
        shape = self.latent_shape(stream.height, stream.width)
        if stream.channels != shape[0]:
            raise ValueError(f"bitstream has {stream.channels} latent channels, model has {shape[0]}")
        symbols = rangecoder.decode(stream.payload, shape, self.tables)
        return self.reconstruct(symbols, stream.height, stream.width)

    def bpp(self, images: np.ndarray, lam: float, hard: bool = False) -> float:
        """Total coded bits over total pixels for one image [3,H,W] or a batch."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        bits = sum(len(self.encode(img, lam, hard).data) * 8 for img in images)
        return bits / float(images.shape[0] * images.shape[2] * images.shape[3])
