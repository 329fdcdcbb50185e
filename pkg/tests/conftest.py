import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

import modnic
from modnic import datagen
from modnic.checkpoint import checkpoint_from_bytes, checkpoint_to_bytes
from modnic.config import TrainConfig
from modnic.trainer import train_base, train_modnet

# acceptance results collected for the terminal summary: number -> (ok, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

FIXED_LAMBDA = 16.0


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(modnic.__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


class ToyModels:
    """Base, VBR and fixed-rate toy checkpoints trained with the default toy config."""

    def __init__(self, base, vbr, fixed, seconds):
        self.base, self.vbr, self.fixed, self.seconds = base, vbr, fixed, seconds


def _train(config: TrainConfig):
    images = datagen.as_unit_batch(
        datagen.generate(config.synthetic_kind, config.synthetic_count, config.image_size, config.seed)
    )
    t0 = time.process_time()
    base, _ = train_base(config, images)
    vbr, _ = train_modnet(config, base, images)
    seconds = time.process_time() - t0
    fixed, _ = train_base(config.replace(lambda_pretrain=FIXED_LAMBDA, erasure_share=0.0), images)
    return base, vbr, fixed, seconds


@pytest.fixture(scope="session")
def toy_models(request) -> ToyModels:
    """Trained once per source revision; cached in the pytest cache directory."""
    config = TrainConfig()
    key = hashlib.sha256((config.to_text() + _source_digest()).encode()).hexdigest()[:16]
    cache = Path(request.config.cache.mkdir("modnic-toy")) / key
    names = ("base", "vbr", "fixed")
    if all((cache / f"{n}.mnck").exists() for n in names) and (cache / "seconds").exists():
        ckpts = [checkpoint_from_bytes((cache / f"{n}.mnck").read_bytes()) for n in names]
        return ToyModels(*ckpts, float((cache / "seconds").read_text()))
    base, vbr, fixed, seconds = _train(config)
    cache.mkdir(parents=True, exist_ok=True)
    for n, ck in zip(names, (base, vbr, fixed)):
        (cache / f"{n}.mnck").write_bytes(checkpoint_to_bytes(ck))
    (cache / "seconds").write_text(repr(seconds))
    return ToyModels(base, vbr, fixed, seconds)


@pytest.fixture(scope="session")
def held_out() -> np.ndarray:
    """32 held-out 32x32 images from a seed disjoint from training."""
    return datagen.as_unit_batch(datagen.generate(TrainConfig().synthetic_kind, 32, 32, 999))


@pytest.fixture(scope="session")
def held_out_large() -> np.ndarray:
    """Larger held-out images, where the fixed header no longer dominates the rate."""
    return datagen.as_unit_batch(datagen.generate(TrainConfig().synthetic_kind, 8, 128, 999))
