"""Two-phase training: base codec at the top rate, then ModNet on a frozen base."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig, paper_lr
from .density import DensityModel
from .modnet import ModNetParams, apply_mask, init_modnet, modnet_forward
from .transforms import TransformParams, analyze, init_transforms, quantize_train, synthesize

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "loss", "D", "R_bpp", "lambda_mean")


class TrainingError(RuntimeError):
    def __init__(self, message: str, checkpoint: "Checkpoint"):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class Checkpoint:
    transforms: TransformParams
    density: DensityModel
    modnet: ModNetParams | None
    config: TrainConfig
    step: int = 0

    def base_parameters(self) -> dict[str, Tensor]:
        return {**self.transforms.parameters(), **self.density.parameters()}

    def parameters(self) -> dict[str, Tensor]:
        params = self.base_parameters()
        if self.modnet is not None:
            params.update(self.modnet.parameters())
        return params

    def copy(self) -> "Checkpoint":
        return copy.deepcopy(self)


@dataclass
class Loss:
    total: Tensor
    mse: float
    bpp: float
    extras: dict = field(default_factory=dict)


def _squared_error(x: Tensor, x_hat: Tensor) -> Tensor:
    diff = ad.sub(x_hat, x)
    return ad.mul(diff, diff)


def loss_fixed(
    transforms: TransformParams,
    density: DensityModel,
    x,
    lam: float,
    rng: np.random.Generator,
    distortion_scale: float = 1.0,
    keep=None,
) -> Loss:
    """lam * D + R with D the [0,1]-scale MSE and R in bits per pixel.

    With ``keep`` (a 0/1 array shaped like the latents) the density is fitted
    to the erased latents ``y * keep`` instead, while the transforms still see
    the rate of the full latents under that density.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    x = ad.as_tensor(x)
    B, _, H, W = x.shape
    y = analyze(transforms, x)
    y_tilde = quantize_train(y, rng)
    x_hat = synthesize(transforms, y_tilde)
    mse = ad.mean(_squared_error(x, x_hat))
    pixels = 1.0 / (B * H * W)
    if keep is None:
        bpp = ad.scale(density.rate_bits(y_tilde), pixels)
        total = ad.add(ad.scale(mse, lam * distortion_scale), bpp)
        return Loss(total, mse.item(), bpp.item())
    bpp = ad.scale(density.detached().rate_bits(y_tilde), pixels)
    erased = quantize_train(ad.constant(y.data * keep), rng)
    fit = ad.scale(density.rate_bits(erased), pixels)
    total = ad.add(ad.add(ad.scale(mse, lam * distortion_scale), bpp), fit)
    return Loss(total, mse.item(), bpp.item(), {"fit_bpp": fit.item()})


def loss_vbr(
    transforms: TransformParams,
    density: DensityModel,
    modnet: ModNetParams,
    x,
    lam: float | Sequence[float],
    rng: np.random.Generator,
    form: str = "weighted",
    distortion_scale: float = 1.0,
    y=None,
) -> Loss:
    """Batch mean of per-sample VBR losses; ``lam`` is a scalar or one value per sample.

    The mask is applied before the noise, so both terms see
    ``(y * mask) + u``.  ``form="literal"`` drops lambda from the distortion.
    """
    x = ad.as_tensor(x)
    B, C, H, W = x.shape
    if y is None:
        y = analyze(transforms, x)
    mask = modnet_forward(modnet, y, lam)
    y_tilde = quantize_train(apply_mask(y, mask, "soft"), rng)
    x_hat = synthesize(transforms, y_tilde)
    sq = _squared_error(x, x_hat)
    lams = np.broadcast_to(np.asarray(lam, dtype=np.float64).reshape(-1), (B,))
    if form == "weighted":
        weights = np.broadcast_to((lams * distortion_scale)[:, None, None, None], x.shape)
        dist = ad.scale(ad.sum(ad.mul(sq, ad.constant(weights))), 1.0 / (B * C * H * W))
    elif form == "literal":
        dist = ad.mean(sq)
    else:
        raise ValueError(f"unknown vbr loss form {form!r}")
    bpp = ad.scale(density.rate_bits(y_tilde), 1.0 / (B * H * W))
    total = ad.add(dist, bpp)
    return Loss(total, float(sq.data.mean()), bpp.item(), {"mask_mean": float(mask.data.mean())})


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _step_count(config: TrainConfig, phase_steps: int, n_images: int) -> tuple[int, int]:
    per_epoch = max(1, math.ceil(n_images / config.batch_size))
    steps = config.epochs * per_epoch if config.epochs > 0 else phase_steps
    return steps, per_epoch


def _lr_at(config: TrainConfig, base_lr: float, step: int, per_epoch: int) -> float:
    if config.lr_schedule == "paper":
        return paper_lr(base_lr, step // per_epoch)
    return base_lr


class _Batcher:
    """Seeded epoch-wise shuffling."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, batch, rng
        self.order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        if self.order.size < self.batch:
            self.order = np.concatenate([self.order, self.rng.permutation(self.n)])
        idx, self.order = self.order[: self.batch], self.order[self.batch :]
        return idx


class _CsvLog:
    def __init__(self, path):
        self.rows: list[dict] = []
        self._fh = open(path, "w", newline="") if path else None
        self._writer = csv.DictWriter(self._fh, LOG_FIELDS) if self._fh else None
        if self._writer:
            self._writer.writeheader()

    def add(self, **row) -> None:
        self.rows.append(row)
        if self._writer:
            self._writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _check_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[0] == 0:
        raise ValueError(f"dataset must be a nonempty [n,3,H,W] array, got {images.shape}")
    return images


def _erasure_mask(config: TrainConfig, shape, transforms: TransformParams, rng) -> np.ndarray | None:
    """Erasure pattern for the density fit: a share of samples keeps each element with prob u**power."""
    if config.erasure_share <= 0:
        return None
    B, _, H, W = shape
    f = transforms.downsampling
    lat = (B, transforms.latent_channels, H // f, W // f)
    keep_rate = rng.uniform(0.0, 1.0, size=B) ** config.erasure_power
    keep_rate[rng.uniform(size=B) >= config.erasure_share] = 1.0
    return (rng.uniform(size=lat) < keep_rate[:, None, None, None]).astype(np.float64)


def train_base(config: TrainConfig, images: np.ndarray, log_path=None) -> tuple[Checkpoint, list[dict]]:
    """Optimize transforms and density with the fixed-rate loss at ``lambda_pretrain``."""
    images = _check_images(images)
    init_rng, data_rng, noise_rng, drop_rng = _streams(config.seed, 4)
    transforms = init_transforms(init_rng, config.latent_channels)
    density = DensityModel(config.latent_channels, init_rng)
    ckpt = Checkpoint(transforms, density, None, config, 0)
    params = list(ckpt.base_parameters().values())
    opt = Adam(params, config.base_lr, (config.adam_beta1, config.adam_beta2), config.adam_eps)
    steps, per_epoch = _step_count(config, config.base_steps, len(images))
    batcher = _Batcher(len(images), config.batch_size, data_rng)
    lam = config.lambda_pretrain
    history = _CsvLog(log_path)
    try:
        for step in range(steps):
            x = images[batcher.next()]
            opt.zero_grad()
            keep = _erasure_mask(config, x.shape, transforms, drop_rng)
            loss = loss_fixed(transforms, density, x, lam, noise_rng, config.distortion_scale, keep)
            value = loss.total.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at base step {step}", ckpt.copy())
            ad.backward(loss.total)
            opt.step(_lr_at(config, config.base_lr, step, per_epoch))
            ckpt.step = step + 1
            history.add(step=step, loss=value, D=loss.mse, R_bpp=loss.bpp, lambda_mean=float(lam))
    finally:
        history.close()
    return ckpt, history.rows


def freeze(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.requires_grad = False
        p.grad = None


def latents(transforms: TransformParams, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = [analyze(transforms, ad.constant(images[i : i + chunk])).data for i in range(0, len(images), chunk)]
    return np.concatenate(out)


def sample_lambdas(rng: np.random.Generator, lam_set: np.ndarray, batch: int) -> np.ndarray:
    """Pairwise distinct lambdas drawn uniformly from the set, one per sample."""
    if batch > lam_set.size:
        raise ValueError(f"batch size {batch} exceeds the {lam_set.size} lambdas available")
    return rng.choice(lam_set, size=batch, replace=False)


def train_modnet(
    config: TrainConfig, base: Checkpoint, images: np.ndarray, log_path=None
) -> tuple[Checkpoint, list[dict]]:
    """Train a fresh ModNet against a frozen copy of ``base``.

    Each mini-batch draws pairwise distinct lambdas uniformly from the lambda
    set; the objective is the sum of per-sample VBR losses.
    """
    images = _check_images(images)
    lam_set = np.asarray(config.lambda_set, dtype=np.float64)
    sample_lambdas(np.random.default_rng(0), lam_set, config.batch_size)  # reject oversized batches up front
    ckpt = base.copy()
    ckpt.config = config
    freeze(ckpt.base_parameters())
    init_rng, data_rng, noise_rng, lam_rng = _streams(config.seed + 1, 4)
    ckpt.modnet = init_modnet(init_rng, config.latent_channels, config.modnet_width, config.lambda_max)
    ckpt.step = 0
    params = list(ckpt.modnet.parameters().values())
    opt = Adam(params, config.modnet_lr, (config.adam_beta1, config.adam_beta2), config.adam_eps)
    steps, per_epoch = _step_count(config, config.modnet_steps, len(images))
    y_all = latents(ckpt.transforms, images)
    batcher = _Batcher(len(images), config.batch_size, data_rng)
    history = _CsvLog(log_path)
    try:
        for step in range(steps):
            idx = batcher.next()
            lams = sample_lambdas(lam_rng, lam_set, len(idx))
            opt.zero_grad()
            loss = loss_vbr(
                ckpt.transforms, ckpt.density, ckpt.modnet, images[idx], lams, noise_rng,
                form=config.vbr_loss, distortion_scale=config.distortion_scale,
                y=ad.constant(y_all[idx]),
            )
            value = loss.total.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at ModNet step {step}", ckpt.copy())
            # sum over the batch of per-sample losses
            ad.backward(ad.scale(loss.total, len(idx)))
            opt.step(_lr_at(config, config.modnet_lr, step, per_epoch))
            ckpt.step = step + 1
            history.add(step=step, loss=value, D=loss.mse, R_bpp=loss.bpp, lambda_mean=float(lams.mean()))
    finally:
        history.close()
    return ckpt, history.rows
