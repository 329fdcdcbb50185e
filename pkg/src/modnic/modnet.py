"""Lambda-conditioned modulation network producing a soft mask over latents.

Eight 1x1 convolutions are interleaved with seven binary modulators.  Each
modulator is a three-layer fully connected net from the scaled lambda to a
gating vector in (0, 1)^M which multiplies the conv features channel-wise,
constant over space.  A final sigmoid turns the last conv output into the
mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LAMBDA_MAX = 256.0
N_CONVS = 8
N_MODULATORS = 7


@dataclass
class BinaryModulatorParams:
    H1: Tensor  # [M, 1]
    b1: Tensor
    H2: Tensor  # [M, M]
    b2: Tensor
    H3: Tensor  # [M, M]
    b3: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"H1": self.H1, "b1": self.b1, "H2": self.H2, "b2": self.b2, "H3": self.H3, "b3": self.b3}


@dataclass
class ModNetParams:
    conv_kernels: list[Tensor]  # [out, in, 1, 1]
    conv_biases: list[Tensor]
    modulators: list[BinaryModulatorParams]
    lambda_max: float = LAMBDA_MAX

    def __post_init__(self):
        if len(self.conv_kernels) != N_CONVS or len(self.conv_biases) != N_CONVS:
            raise ValueError(f"ModNet needs exactly {N_CONVS} convolutions")
        if len(self.modulators) != N_MODULATORS:
            raise ValueError(f"ModNet needs exactly {N_MODULATORS} binary modulators")

    @property
    def latent_channels(self) -> int:
        return self.conv_kernels[0].shape[1]

    @property
    def width(self) -> int:
        return self.conv_kernels[0].shape[0]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (k, b) in enumerate(zip(self.conv_kernels, self.conv_biases)):
            out[f"modnet.conv.{i}.kernel"] = k
            out[f"modnet.conv.{i}.bias"] = b
        for i, bm in enumerate(self.modulators):
            for name, t in bm.tensors().items():
                out[f"modnet.bm.{i}.{name}"] = t
        return out


def init_modnet(
    rng: np.random.Generator,
    latent_channels: int = 32,
    width: int = 32,
    lambda_max: float = LAMBDA_MAX,
    mask_bias: float = 1.0,
) -> ModNetParams:
    """Start near "keep everything": modulators close to 1, mask near sigmoid(mask_bias)."""
    N, M = latent_channels, width
    kernels, biases = [], []
    for i in range(N_CONVS):
        cin = N if i == 0 else M
        cout = N if i == N_CONVS - 1 else M
        if i == N_CONVS - 1:
            w = rng.standard_normal((cout, cin)) * (0.01 / np.sqrt(cin))
            b = np.full(cout, mask_bias)
        elif i == 0:
            w = rng.standard_normal((cout, cin)) / np.sqrt(cin)
            b = np.zeros(cout)
        else:
            w = np.eye(M) + rng.standard_normal((M, M)) * (0.1 / np.sqrt(M))
            b = np.zeros(cout)
        kernels.append(Tensor(w.reshape(cout, cin, 1, 1), True))
        biases.append(Tensor(b, True))
    mods = []
    for _ in range(N_MODULATORS):
        mods.append(
            BinaryModulatorParams(
                H1=Tensor(rng.standard_normal((M, 1)), True),
                b1=Tensor(rng.uniform(0.0, 0.5, M), True),
                H2=Tensor(rng.standard_normal((M, M)) * np.sqrt(2.0 / M), True),
                b2=Tensor(np.zeros(M), True),
                H3=Tensor(rng.standard_normal((M, M)) * (0.1 / np.sqrt(M)), True),
                b3=Tensor(np.full(M, -4.0), True),
            )
        )
    return ModNetParams(kernels, biases, mods, float(lambda_max))


def scale_lambda(lam, lambda_max: float = LAMBDA_MAX) -> np.ndarray:
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    if np.any(~np.isfinite(lam)) or np.any(lam < 1.0) or np.any(lam > lambda_max):
        raise ValueError(f"lambda must lie in [1, {lambda_max:g}], got {lam.tolist()}")
    return np.log(lam) / math.log(lambda_max)


def bm_forward(params: BinaryModulatorParams, lam_scaled) -> Tensor:
    """Gating vector(s) for scaled lambda input; [B, 1] in, [B, M] out."""
    x = ad.as_tensor(lam_scaled)
    if x.data.ndim == 0:
        x = ad.reshape(x, (1, 1))
    elif x.data.ndim == 1:
        x = ad.reshape(x, (x.shape[0], 1))
    f1 = ad.relu(ad.dense(x, params.H1, params.b1))
    f2 = ad.relu(ad.dense(f1, params.H2, params.b2))
    logits = ad.dense(f2, params.H3, params.b3)
    # 1 - sigmoid(z) == sigmoid(-z), which stays strictly inside (0, 1)
    return ad.sigmoid(ad.neg(logits))


def _lambda_column(lam, batch: int, lambda_max: float) -> Tensor:
    scaled = scale_lambda(lam, lambda_max)
    if scaled.size == 1:
        scaled = np.repeat(scaled, batch)
    if scaled.size != batch:
        raise ValueError(f"got {scaled.size} lambdas for a batch of {batch}")
    return ad.constant(scaled.reshape(batch, 1))


def modnet_forward(params: ModNetParams, y, lam: float | Sequence[float]) -> Tensor:
    """Mask in (0, 1) with the shape of y; ``lam`` is a scalar or one value per batch item."""
    y = ad.as_tensor(y)
    if y.data.ndim != 4 or y.shape[1] != params.latent_channels:
        raise ad.ShapeError(f"modnet expects [B,{params.latent_channels},H,W], got {y.shape}")
    B, _, H, W = y.shape
    lam_col = _lambda_column(lam, B, params.lambda_max)
    h = ad.conv2d(y, params.conv_kernels[0], params.conv_biases[0])
    for k, bm in enumerate(params.modulators):
        gate = ad.broadcast_spatial(bm_forward(bm, lam_col), H, W)
        h = ad.conv2d(ad.mul(h, gate), params.conv_kernels[k + 1], params.conv_biases[k + 1])
    return ad.sigmoid(h)


def apply_mask(y, mask, mode: str = "soft") -> Tensor:
    y, mask = ad.as_tensor(y), ad.as_tensor(mask)
    if mode == "soft":
        return ad.mul(y, mask)
    if mode in ("hard", "hard@0.5"):
        return ad.mul(y, ad.constant((mask.data >= 0.5).astype(np.float64)))
    raise ValueError(f"unknown mask mode {mode!r}")
