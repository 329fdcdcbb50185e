"""Directional finite-difference checks for every differentiable op.

At each random point the analytic directional derivative ``<grad, v>`` is
compared with the central difference ``(f(x + h v) - f(x - h v)) / 2h`` for a
random unit direction ``v`` over all inputs jointly.  Relative error uses the denominator
``max(|a|, |b|, 1e-8)``.  Inputs to kinked ops (relu, clamp) are kept away
from the kink so the step never crosses it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .density import DensityModel
from .modnet import bm_forward, init_modnet, modnet_forward
from .transforms import init_transforms

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class Case:
    params: list[Tensor]
    forward: Callable[[], Tensor]


@dataclass
class CheckResult:
    name: str
    points: int
    max_rel_error: float
    tolerance: float = TOLERANCE

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tolerance


def directional_error(case: Case, rng: np.random.Generator, step: float = STEP) -> float:
    for p in case.params:
        p.requires_grad = True
        p.grad = None
    ad.backward(case.forward())
    dirs = [rng.standard_normal(p.shape) for p in case.params]
    norm = np.sqrt(sum(float(np.sum(v * v)) for v in dirs))
    dirs = [v / norm for v in dirs]
    a = float(sum(np.sum(p.grad * v) for p, v in zip(case.params, dirs) if p.grad is not None))
    base = [p.data for p in case.params]

    def at(sign: float) -> float:
        for p, x, v in zip(case.params, base, dirs):
            p.data = x + sign * step * v
        return case.forward().item()

    b = (at(1.0) - at(-1.0)) / (2.0 * step)
    for p, x in zip(case.params, base):
        p.data = x
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


# ---------------------------------------------------------------- cases


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum(ad.mul(out, ad.constant(w)))


def _away_from_zero(rng, shape, margin=0.05) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 2.0, size=shape)


def _op_case(op, *inputs, rng) -> Case:
    params = [Tensor(x, True) for x in inputs]
    out_shape = op(*params).shape
    w = rng.standard_normal(out_shape)
    return Case(params, lambda: _weighted(op(*params), w))


def _unary(op, kinked=False):
    def build(rng):
        x = _away_from_zero(rng, (3, 4)) if kinked else rng.standard_normal((3, 4)) * 2
        return _op_case(op, x, rng=rng)
    return build


def _binary(op):
    return lambda rng: _op_case(op, rng.standard_normal((2, 5)), rng.standard_normal((2, 5)), rng=rng)


def _conv(k, s, transposed):
    def build(rng):
        C, O = 2, 3
        x = rng.standard_normal((2, C, 6, 6))
        kern = rng.standard_normal((C, O, k, k) if transposed else (O, C, k, k))
        bias = rng.standard_normal(O)
        pad = k // 2
        if transposed:
            op = lambda a, b, c: ad.transposed_conv2d(a, b, c, s, pad, s - 1)
        else:
            op = lambda a, b, c: ad.conv2d(a, b, c, s, pad)
        return _op_case(op, x, kern, bias, rng=rng)
    return build


def _density_case(rng) -> Case:
    dm = DensityModel(3, rng, init_scale=rng.uniform(1.0, 10.0))
    _jitter(dm.parameters(), rng)
    y = Tensor(rng.standard_normal((2, 3, 2, 2)) * 3, True)
    return Case([y, *dm.parameters().values()], lambda: dm.rate_bits(y))


def _bm_case(rng) -> Case:
    mod = init_modnet(rng, 4, 5)
    bm = mod.modulators[0]
    for t in bm.tensors().values():
        t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    lam = rng.uniform(0.0, 1.0, size=(3, 1))
    w = rng.standard_normal((3, 5))
    return Case(list(bm.tensors().values()), lambda: _weighted(bm_forward(bm, lam), w))


def _modnet_case(rng) -> Case:
    mod = init_modnet(rng, 4, 5)
    _jitter(mod.parameters(), rng)
    y = Tensor(rng.standard_normal((2, 4, 2, 2)), True)
    lams = rng.uniform(1.0, 256.0, size=2)
    w = rng.standard_normal((2, 4, 2, 2))
    return Case([y, *mod.parameters().values()], lambda: _weighted(modnet_forward(mod, y, lams), w))


def _jitter(params, rng, scale=0.1) -> None:
    # zero-initialized biases would leave relu inputs exactly at the kink
    for p in params.values():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def _loss_fixed_case(rng) -> Case:
    from .trainer import loss_fixed

    transforms = init_transforms(rng, 4)
    density = DensityModel(4, rng)
    _jitter({**transforms.parameters(), **density.parameters()}, rng)
    x = rng.uniform(size=(2, 3, 16, 16))
    seed = int(rng.integers(2**31))
    lam = float(rng.uniform(1.0, 256.0))
    params = [*transforms.parameters().values(), *density.parameters().values()]
    return Case(params, lambda: loss_fixed(transforms, density, x, lam, np.random.default_rng(seed)).total)


def _loss_vbr_case(rng) -> Case:
    from .trainer import freeze, loss_vbr

    transforms = init_transforms(rng, 4)
    density = DensityModel(4, rng)
    _jitter({**transforms.parameters(), **density.parameters()}, rng)
    freeze({**transforms.parameters(), **density.parameters()})
    mod = init_modnet(rng, 4, 5)
    _jitter(mod.parameters(), rng)
    x = rng.uniform(size=(2, 3, 16, 16))
    seed = int(rng.integers(2**31))
    lams = rng.uniform(1.0, 256.0, size=2)
    return Case(
        list(mod.parameters().values()),
        lambda: loss_vbr(transforms, density, mod, x, lams, np.random.default_rng(seed)).total,
    )


CASES: dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "neg": _unary(ad.neg),
    "relu": _unary(ad.relu, kinked=True),
    "sigmoid": _unary(ad.sigmoid),
    "tanh": _unary(ad.tanh),
    "softplus": _unary(ad.softplus),
    "log": lambda rng: _op_case(ad.log, rng.uniform(0.1, 3.0, (3, 4)), rng=rng),
    "clamp_min": lambda rng: _op_case(lambda a: ad.clamp_min(a, 0.5), 0.5 + _away_from_zero(rng, (3, 4)), rng=rng),
    "scale": _unary(lambda a: ad.scale(a, 1.7)),
    "shift": _unary(lambda a: ad.shift(a, -0.3)),
    "reshape": _unary(lambda a: ad.reshape(a, (4, 3))),
    "transpose": lambda rng: _op_case(lambda a: ad.transpose(a, (2, 0, 1)), rng.standard_normal((2, 3, 4)), rng=rng),
    "broadcast_spatial": _unary(lambda a: ad.broadcast_spatial(a, 2, 3)),
    "sum": _unary(lambda a: ad.scale(ad.sum(a), 1.0)),
    "mean": _unary(ad.mean),
    "dense": lambda rng: _op_case(
        ad.dense, rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5), rng=rng
    ),
    "bmm": lambda rng: _op_case(ad.bmm, rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5)), rng=rng),
    **{
        f"{'transposed_conv2d' if t else 'conv2d'}_k{k}_s{s}": _conv(k, s, t)
        for t in (False, True) for k in (1, 3, 5) for s in (1, 2)
    },
    "density.rate_bits": _density_case,
    "binary_modulator": _bm_case,
    "modnet": _modnet_case,
    "loss_fixed": _loss_fixed_case,
    "loss_vbr": _loss_vbr_case,
}


def check_case(name: str, points: int = 100, seed: int = 0, step: float = STEP) -> CheckResult:
    build = CASES[name]
    worst = 0.0
    for i in range(points):
        rng = np.random.default_rng([seed, i, sum(map(ord, name))])
        worst = max(worst, directional_error(build(rng), rng, step))
    return CheckResult(name, points, worst)


def run_all(points: int = 100, seed: int = 0, names=None) -> list[CheckResult]:
    return [check_case(n, points, seed) for n in (names or CASES)]
