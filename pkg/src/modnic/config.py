"""Training configuration as plain ``key = value`` text.

Blank lines and ``#`` comments are ignored.  A ``preset`` key (``toy`` or
``paper``) selects the defaults the remaining keys override.

Loss scaling: the distortion term is ``lambda * distortion_scale * MSE`` with
MSE over [0, 1] pixel values, and the rate term is bits per pixel
(bits / (H * W) per image).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

LAMBDA_SET_MAX = 256


@dataclass
class TrainConfig:
    preset: str = "toy"
    seed: int = 0
    latent_channels: int = 32
    modnet_width: int = 32
    batch_size: int = 8
    image_size: int = 32
    base_steps: int = 3000
    base_lr: float = 1e-3
    modnet_steps: int = 5000
    modnet_lr: float = 1e-3
    lr_schedule: str = "constant"  # constant | paper
    epochs: int = 0  # >0 overrides the step counts: steps = epochs * ceil(n / batch)
    lambda_pretrain: float = 256.0
    # density fit on erased latents: share of samples erased, keep rate u**power with u ~ U(0, 1)
    erasure_share: float = 1.0
    erasure_power: float = 4.0
    lambda_min: int = 1
    lambda_max: int = LAMBDA_SET_MAX
    vbr_loss: str = "weighted"  # weighted (lambda*D + R) | literal (D + R)
    distortion_scale: float = 0.35
    mask_mode: str = "soft"
    support: int = 64
    precision: int = 16
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dataset: str = ""  # directory of PPM/PGM files; empty means synthetic data
    synthetic_kind: str = "blobs+gradients"
    synthetic_count: int = 512

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_min < 1 or self.lambda_max < self.lambda_min:
            raise ValueError("lambda set is empty")
        if min(self.base_lr, self.modnet_lr) < 0:
            raise ValueError("learning rates must be >= 0")
        if self.lr_schedule not in ("constant", "paper"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.vbr_loss not in ("weighted", "literal"):
            raise ValueError(f"unknown vbr_loss {self.vbr_loss!r}")
        if self.mask_mode not in ("soft", "hard"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if not 0.0 <= self.erasure_share <= 1.0 or self.erasure_power <= 0:
            raise ValueError("erasure_share must be in [0, 1] and erasure_power > 0")
        if not 12 <= self.precision <= 16:
            raise ValueError("precision must be in [12, 16]")

    @property
    def lambda_set(self) -> list[int]:
        return list(range(self.lambda_min, self.lambda_max + 1))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def preset_config(cls, name: str) -> "TrainConfig":
        try:
            return cls(**PRESETS[name])
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        pairs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            pairs[key] = value
        base = cls.preset_config(pairs.pop("preset", "toy"))
        types = {f.name: f.type for f in fields(cls)}
        changes = {}
        for key, value in pairs.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kind = types[key]
            if kind == "int":
                changes[key] = int(value)
            elif kind == "float":
                changes[key] = float(value)
            else:
                changes[key] = value
        return base.replace(**changes)


PRESETS = {
    "toy": {},
    "paper": {
        "preset": "paper",
        "latent_channels": 192,
        "modnet_width": 100,
        "batch_size": 12,
        "image_size": 256,
        "base_lr": 5e-5,
        "modnet_lr": 5e-5,
        "lr_schedule": "paper",
        "epochs": 20,
    },
}


def paper_lr(base_lr: float, epoch: int) -> float:
    """Constant for the first 10 epochs, then halved every 3 epochs."""
    if epoch < 10:
        return base_lr
    return base_lr * 0.5 ** ((epoch - 10) // 3 + 1)
