"""Checkpoint <-> MNCK container bytes."""

from __future__ import annotations

import re

import numpy as np

from .autodiff import Tensor
from .config import TrainConfig
from .density import DensityModel
from .formats import FormatError, load_tensors, save_tensors
from .modnet import N_CONVS, N_MODULATORS, BinaryModulatorParams, ModNetParams
from .trainer import Checkpoint
from .transforms import ANALYSIS_GEOMETRY, ConvLayer, TransformParams

STEP_KEY = "meta.step"


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    tensors = {name: t.data for name, t in ckpt.parameters().items()}
    tensors[STEP_KEY] = np.asarray(float(ckpt.step))
    return save_tensors(tensors, ckpt.config.to_text())


def _take(tensors: dict, name: str, trainable: bool) -> Tensor:
    try:
        arr = tensors.pop(name)
    except KeyError:
        raise FormatError(f"checkpoint is missing tensor {name!r}") from None
    t = Tensor(arr, trainable)
    return t


def checkpoint_from_bytes(data: bytes, trainable: bool = False) -> Checkpoint:
    tensors, config_text = load_tensors(data)
    config = TrainConfig.from_text(config_text)
    step = int(tensors.pop(STEP_KEY, np.asarray(0.0)))

    n = len(ANALYSIS_GEOMETRY)
    analysis, synthesis = [], []
    for i, (k, s, p) in enumerate(ANALYSIS_GEOMETRY):
        analysis.append(
            ConvLayer(_take(tensors, f"g_a.{i}.kernel", trainable), _take(tensors, f"g_a.{i}.bias", trainable),
                      s, p, relu=i < n - 1)
        )
    for i, (k, s, p) in enumerate(reversed(ANALYSIS_GEOMETRY)):
        synthesis.append(
            ConvLayer(_take(tensors, f"g_s.{i}.kernel", trainable), _take(tensors, f"g_s.{i}.bias", trainable),
                      s, p, relu=i < n - 1, output_padding=s - 1)
        )
    N = analysis[-1].kernel.shape[0]
    transforms = TransformParams(analysis, synthesis, N)

    stages = sum(1 for name in tensors if re.fullmatch(r"density\.\d+\.matrix", name))
    density = DensityModel.__new__(DensityModel)
    density.channels = N
    density.matrices = [_take(tensors, f"density.{i}.matrix", trainable) for i in range(stages)]
    density.biases = [_take(tensors, f"density.{i}.bias", trainable) for i in range(stages)]
    density.factors = [_take(tensors, f"density.{i}.factor", trainable) for i in range(stages)]
    density.filters = tuple(m.shape[1] for m in density.matrices[:-1])

    modnet = None
    if "modnet.conv.0.kernel" in tensors:
        kernels = [_take(tensors, f"modnet.conv.{i}.kernel", trainable) for i in range(N_CONVS)]
        biases = [_take(tensors, f"modnet.conv.{i}.bias", trainable) for i in range(N_CONVS)]
        mods = []
        for i in range(N_MODULATORS):
            fields = {key: _take(tensors, f"modnet.bm.{i}.{key}", trainable)
                      for key in ("H1", "b1", "H2", "b2", "H3", "b3")}
            mods.append(BinaryModulatorParams(**fields))
        modnet = ModNetParams(kernels, biases, mods, float(config.lambda_max))
    if tensors:
        raise FormatError(f"unexpected tensors in checkpoint: {sorted(tensors)}")
    return Checkpoint(transforms, density, modnet, config, step)


def save_checkpoint(path, ckpt: Checkpoint) -> bytes:
    data = checkpoint_to_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_checkpoint(path) -> tuple[Checkpoint, bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    return checkpoint_from_bytes(data), data
