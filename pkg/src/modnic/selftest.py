"""Fast sanity checks behind ``modnic selftest`` (a few seconds, no training)."""

from __future__ import annotations

import numpy as np

from . import gradcheck, rangecoder, rdmodel
from .codec import Codec
from .config import TrainConfig
from .density import DensityModel, quantize_pmf
from .metrics import ms_ssim, psnr
from .modnet import init_modnet
from .trainer import Checkpoint
from .transforms import init_transforms


def _range_coder(rng) -> tuple[bool, str]:
    pmf = rng.dirichlet(np.full(9, 0.5), size=3)
    cdf = np.stack([quantize_pmf(p, 16) for p in pmf])
    idx = np.stack([rng.choice(9, size=2000, p=p) for p in pmf])
    rows = np.repeat(np.arange(3), 2000)
    data = rangecoder.encode_indices(idx.reshape(-1), rows, cdf, 16)
    back = rangecoder.decode_indices(data, rows, cdf, 16)
    return bool(np.array_equal(back, idx.reshape(-1))), f"{len(data)} bytes"


def _codec_roundtrip(rng) -> tuple[bool, str]:
    cfg = TrainConfig(latent_channels=8, modnet_width=8)
    ckpt = Checkpoint(init_transforms(rng, 8), DensityModel(8, rng), init_modnet(rng, 8, 8), cfg)
    codec = Codec(ckpt)
    image = rng.uniform(size=(3, 32, 48))
    enc = codec.encode(image, 16.0)
    same = np.array_equal(codec.decode(enc.data), enc.reconstruction)
    return bool(same), f"{enc.bpp:.4f} bpp"


def _gradients(seed) -> tuple[bool, str]:
    results = gradcheck.run_all(points=5, seed=seed)
    worst = max(results, key=lambda r: r.max_rel_error)
    return all(r.ok for r in results), f"worst {worst.name} {worst.max_rel_error:.2e}"


def _metrics(rng) -> tuple[bool, str]:
    x = rng.uniform(size=(3, 32, 32))
    ok = psnr(x, x) == 99.0 and ms_ssim(x, x) == 1.0 and abs(psnr(x, x + 0.1) - 20.0) < 1e-9
    return ok, "identities"


def _rd_fit() -> tuple[bool, str]:
    a, b = 39.301, 1.296
    lams = [1, 4, 8, 16, 32, 64, 100]
    samples = [rdmodel.RdSample(l, rdmodel.eval_R_of_lambda(l, a, b), rdmodel.eval_D_of_lambda(l, a, b)) for l in lams]
    p = rdmodel.fit(samples)
    err = max(abs(p.alpha / a - 1), abs(p.beta / b - 1))
    return err < 0.01, f"relative error {err:.1e}"


def run(seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    checks = [
        ("range-coder", lambda: _range_coder(rng)),
        ("codec-roundtrip", lambda: _codec_roundtrip(rng)),
        ("gradients", lambda: _gradients(seed)),
        ("metrics", lambda: _metrics(rng)),
        ("rd-fit", _rd_fit),
    ]
    out = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # report and keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, ok, detail))
    return out
