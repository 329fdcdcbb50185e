"""Toy analysis/synthesis transforms and the two quantizers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

DEFAULT_SUPPORT = 64

# (kernel, stride, pad) per analysis layer; synthesis mirrors this list in reverse
ANALYSIS_GEOMETRY = ((5, 2, 2), (3, 2, 1), (3, 2, 1), (3, 2, 1))


@dataclass
class ConvLayer:
    kernel: Tensor
    bias: Tensor
    stride: int
    pad: int
    relu: bool
    output_padding: int = 0


@dataclass
class TransformParams:
    analysis: list[ConvLayer]
    synthesis: list[ConvLayer]
    latent_channels: int

    @property
    def downsampling(self) -> int:
        return 2 ** sum(1 for layer in self.analysis if layer.stride == 2)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, layers in (("g_a", self.analysis), ("g_s", self.synthesis)):
            for i, layer in enumerate(layers):
                out[f"{prefix}.{i}.kernel"] = layer.kernel
                out[f"{prefix}.{i}.bias"] = layer.bias
        return out


def init_transforms(rng: np.random.Generator, latent_channels: int = 32) -> TransformParams:
    N = latent_channels
    n = len(ANALYSIS_GEOMETRY)
    analysis = []
    cin = 3
    for i, (k, s, p) in enumerate(ANALYSIS_GEOMETRY):
        last = i == n - 1
        gain = 1.0 if last else 2.0
        kernel = rng.standard_normal((N, cin, k, k)) * np.sqrt(gain / (cin * k * k))
        analysis.append(ConvLayer(Tensor(kernel, True), Tensor(np.zeros(N), True), s, p, relu=not last))
        cin = N

    synthesis = []
    for i, (k, s, p) in enumerate(reversed(ANALYSIS_GEOMETRY)):
        last = i == n - 1
        cout = 3 if last else N
        gain = 1.0 if last else 2.0
        # a stride-s transposed conv sums about k*k/s^2 taps per output
        fan_in = N * k * k / (s * s)
        kernel = rng.standard_normal((N, cout, k, k)) * np.sqrt(gain / fan_in)
        bias = np.full(cout, 0.5) if last else np.zeros(cout)
        synthesis.append(
            ConvLayer(Tensor(kernel, True), Tensor(bias, True), s, p, relu=not last, output_padding=s - 1)
        )
    return TransformParams(analysis, synthesis, N)


def analyze(params: TransformParams, x) -> Tensor:
    """Map images [B,3,H,W] to latents [B,N,H/16,W/16]."""
    x = ad.as_tensor(x)
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ad.ShapeError(f"analyze expects [B,3,H,W], got {x.shape}")
    f = params.downsampling
    H, W = x.shape[2:]
    if H % f or W % f:
        raise ad.ShapeError(f"image size {H}x{W} is not divisible by {f}; pad it first")
    h = x
    for layer in params.analysis:
        h = ad.conv2d(h, layer.kernel, layer.bias, layer.stride, layer.pad)
        if layer.relu:
            h = ad.relu(h)
    return h


def synthesize(params: TransformParams, y_hat) -> Tensor:
    """Map latents back to images.  Output is not clamped; see :func:`to_image`."""
    y_hat = ad.as_tensor(y_hat)
    if y_hat.data.ndim != 4 or y_hat.shape[1] != params.latent_channels:
        raise ad.ShapeError(
            f"synthesize expects [B,{params.latent_channels},H,W], got {y_hat.shape}"
        )
    h = y_hat
    for layer in params.synthesis:
        h = ad.transposed_conv2d(h, layer.kernel, layer.bias, layer.stride, layer.pad, layer.output_padding)
        if layer.relu:
            h = ad.relu(h)
    return h


def to_image(x_hat: np.ndarray) -> np.ndarray:
    return np.clip(x_hat, 0.0, 1.0)


def quantize_train(y, rng: np.random.Generator) -> Tensor:
    """Additive uniform noise in [-0.5, 0.5); the noise is a constant for autodiff."""
    y = ad.as_tensor(y)
    u = rng.uniform(-0.5, 0.5, size=y.shape)
    return ad.add(y, ad.constant(u))


@dataclass
class QuantStats:
    clamped: int = 0


def round_half_away(y: np.ndarray) -> np.ndarray:
    return np.sign(y) * np.floor(np.abs(y) + 0.5)


def quantize_infer(y, support: int = DEFAULT_SUPPORT, stats: QuantStats | None = None) -> np.ndarray:
    """Round half away from zero, then clamp into [-support, support]."""
    data = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    q = round_half_away(data)
    over = np.abs(q) > support
    n_over = int(over.sum())
    if n_over:
        log.warning("clamped %d latent value(s) into [-%d, %d]", n_over, support, support)
        if stats is not None:
            stats.clamped += n_over
        q = np.clip(q, -support, support)
    return q.astype(np.int64)


@dataclass
class LatentCode:
    """Integer latents of one image, laid out [N, H_f, W_f]."""

    symbols: np.ndarray
    image_shape: tuple[int, int]
    support: int = DEFAULT_SUPPORT
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int64)
        if self.symbols.ndim != 3:
            raise ad.ShapeError(f"LatentCode symbols must be [N,H,W], got {self.symbols.shape}")
        if self.symbols.size and np.abs(self.symbols).max() > self.support:
            raise ValueError(f"latent symbols outside [-{self.support}, {self.support}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.symbols.shape
