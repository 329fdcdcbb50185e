"""Per-channel monotone cumulative density network (factorized prior).

Each latent channel owns a small chain of stages mapping a scalar to a
logit.  Stage weights pass through softplus so they stay positive, and the
gating factors pass through tanh so ``x + a * tanh(x)`` stays increasing.
A final sigmoid gives the cumulative value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

P_FLOOR = 2.0**-15
DEFAULT_PRECISION = 16


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


class DensityModel:
    def __init__(
        self,
        channels: int,
        rng: np.random.Generator | None = None,
        filters: tuple[int, ...] = (3, 3, 3),
        init_scale: float = 10.0,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.filters = tuple(filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.factors: list[Tensor] = []
        for i in range(len(dims) - 1):
            fi, fo = dims[i], dims[i + 1]
            init = _inv_softplus(1.0 / scale / fo)
            self.matrices.append(Tensor(np.full((channels, fo, fi), init), True))
            self.biases.append(Tensor(rng.uniform(-0.5, 0.5, size=(channels, fo)), True))
            self.factors.append(Tensor(np.zeros((channels, fo)), True))

    @property
    def stages(self) -> int:
        return len(self.matrices)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i in range(self.stages):
            out[f"density.{i}.matrix"] = self.matrices[i]
            out[f"density.{i}.bias"] = self.biases[i]
            out[f"density.{i}.factor"] = self.factors[i]
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters().values():
            p.requires_grad = flag

    def detached(self) -> "DensityModel":
        """A view sharing parameter values but contributing no gradients."""
        out = DensityModel.__new__(DensityModel)
        out.channels, out.filters = self.channels, self.filters
        out.matrices = [ad.constant(t.data) for t in self.matrices]
        out.biases = [ad.constant(t.data) for t in self.biases]
        out.factors = [ad.constant(t.data) for t in self.factors]
        return out

    # -- differentiable path -------------------------------------------------

    def logits(self, x) -> Tensor:
        """Cumulative logits for values x of shape [C, n] (one row per channel)."""
        x = ad.as_tensor(x)
        C, n = x.shape
        if C != self.channels:
            raise ad.ShapeError(f"density has {self.channels} channels, got values for {C}")
        h = ad.reshape(x, (C, 1, n))
        for i in range(self.stages):
            fo = self.matrices[i].shape[1]
            h = ad.bmm(ad.softplus(self.matrices[i]), h)
            h = ad.add(h, ad.reshape(ad.broadcast_spatial(self.biases[i], 1, n), (C, fo, n)))
            gate = ad.reshape(ad.broadcast_spatial(ad.tanh(self.factors[i]), 1, n), (C, fo, n))
            h = ad.add(h, ad.mul(gate, ad.tanh(h)))
        return ad.reshape(h, (C, n))

    def cdf_tensor(self, x) -> Tensor:
        return ad.sigmoid(self.logits(x))

    def interval_prob(self, values) -> Tensor:
        """c(v + 1/2) - c(v - 1/2) per element of a [C, n] tensor."""
        values = ad.as_tensor(values)
        upper = self.cdf_tensor(ad.shift(values, 0.5))
        lower = self.cdf_tensor(ad.shift(values, -0.5))
        return ad.sub(upper, lower)

    def rate_bits(self, y_tilde, p_floor: float = P_FLOOR) -> Tensor:
        """Estimated bits for latents [B, C, H, W], summed over all elements."""
        y_tilde = ad.as_tensor(y_tilde)
        B, C, H, W = y_tilde.shape
        per_channel = ad.reshape(ad.transpose(y_tilde, (1, 0, 2, 3)), (C, B * H * W))
        p = ad.clamp_min(self.interval_prob(per_channel), p_floor)
        return ad.scale(ad.sum(ad.log(p)), -1.0 / math.log(2.0))

    # -- evaluation helpers (no tape) -----------------------------------------

    def _eval(self, values: np.ndarray) -> np.ndarray:
        return self.cdf_tensor(ad.constant(values)).data

    def cdf(self, channel: int, x) -> np.ndarray | float:
        xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
        grid = np.zeros((self.channels, xs.size))
        grid[channel] = xs
        out = self._eval(grid)[channel]
        return float(out[0]) if np.ndim(x) == 0 else out.reshape(np.shape(x))

    def pmf(self, channel: int, v) -> np.ndarray | float:
        v = np.asarray(v, dtype=np.float64)
        upper = self.cdf(channel, v + 0.5)
        lower = self.cdf(channel, v - 0.5)
        return upper - lower

    def pmf_matrix(self, support: int) -> np.ndarray:
        """pmf over integers [-support, support] for every channel, shape [C, 2L+1]."""
        grid = np.arange(-support, support + 1, dtype=np.float64)
        rows = np.broadcast_to(grid, (self.channels, grid.size))
        upper = self._eval(rows + 0.5)
        lower = self._eval(rows - 0.5)
        return upper - lower

    def build_tables(self, support: int = 64, precision: int = DEFAULT_PRECISION) -> "QuantizedCdfTable":
        pmfs = self.pmf_matrix(support)
        cdf = np.stack([quantize_pmf(row, precision) for row in pmfs])
        return QuantizedCdfTable(cdf=cdf, support=support, precision=precision)


@dataclass
class QuantizedCdfTable:
    """Integer cumulative frequencies, one row of 2L+2 boundaries per channel."""

    cdf: np.ndarray
    support: int
    precision: int

    @property
    def channels(self) -> int:
        return self.cdf.shape[0]

    def probabilities(self) -> np.ndarray:
        return np.diff(self.cdf, axis=1) / float(1 << self.precision)


def quantize_pmf(pmf, precision: int = DEFAULT_PRECISION) -> np.ndarray:
    """Integer cumulative table for a pmf: every symbol gets >= 1, total 2**precision.

    Frequencies are ``1 + floor(p * spare)`` with ``spare = 2**P - n``; leftover
    counts go to the largest fractional parts (ties to the lowest index).
    """
    if not 1 <= precision <= 30:
        raise ValueError(f"precision {precision} out of range")
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.size
    total = 1 << precision
    if n == 0 or n > total:
        raise ValueError(f"cannot fit {n} symbols into precision {precision}")
    pmf = np.clip(pmf, 0.0, None)
    mass = pmf.sum()
    p = pmf / mass if mass > 0 else np.full(n, 1.0 / n)
    spare = total - n
    scaled = p * spare
    base = np.floor(scaled)
    freq = 1 + base.astype(np.int64)
    leftover = spare - int(base.sum())
    if leftover > 0:
        order = np.argsort(-(scaled - base), kind="stable")
        freq[order[:leftover]] += 1
    elif leftover < 0:  # only reachable through rounding in p.sum() > 1
        order = np.argsort(-freq, kind="stable")
        for idx in order:
            if leftover == 0:
                break
            take = min(freq[idx] - 1, -leftover)
            freq[idx] -= take
            leftover += take
    cdf = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(freq, out=cdf[1:])
    return cdf
