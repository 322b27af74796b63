"""Small U-Net feature extractor and mean-teacher EMA."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .rng import Rng
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    concat,
    conv2d,
    default_dtype,
    leaky_relu,
    resize_bilinear,
)

Params = dict[str, Tensor]


@dataclass(frozen=True)
class BackboneArch:
    levels: int = 3
    base: int = 8
    in_channels: int = 1
    feat_channels: int = 16
    slope: float = 0.01

    def channels(self, level: int) -> int:
        return self.base * 2**level


def init_backbone(arch: BackboneArch, rng: Rng) -> Params:
    """He-normal conv kernels, zero biases."""
    dtype = default_dtype()
    params: Params = {}

    def conv(name, cin, cout, k):
        std = np.sqrt(2.0 / (cin * k * k))
        params[f"{name}.w"] = Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    cin = arch.in_channels
    for lvl in range(arch.levels + 1):
        conv(f"enc{lvl}", cin, arch.channels(lvl), 3)
        cin = arch.channels(lvl)
    for lvl in reversed(range(arch.levels)):
        conv(f"dec{lvl}", arch.channels(lvl + 1) + arch.channels(lvl), arch.channels(lvl), 3)
    conv("head", arch.channels(0), arch.feat_channels, 1)
    return params


def check_extent(shape, levels: int) -> None:
    h, w = shape[-2:]
    mult = 2**levels
    if h % mult or w % mult:
        raise DimensionError(f"image extents {h}×{w} must be divisible by {mult} for a {levels}-level backbone")


def forward(params: Mapping[str, Tensor], image, arch: BackboneArch) -> Tensor:
    """Feature map (N×D′×H×W, or D′×H×W for a single image) at input resolution."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    check_extent(x.shape, arch.levels)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    skips = []
    for lvl in range(arch.levels + 1):
        if lvl:
            h, w = x.shape[-2:]
            x = resize_bilinear(x, h // 2, w // 2)
        x = leaky_relu(conv2d(x, params[f"enc{lvl}.w"], params[f"enc{lvl}.b"]), arch.slope)
        skips.append(x)
    for lvl in reversed(range(arch.levels)):
        skip = skips[lvl]
        x = resize_bilinear(x, *skip.shape[-2:])
        x = concat([x, skip], axis=1)
        x = leaky_relu(conv2d(x, params[f"dec{lvl}.w"], params[f"dec{lvl}.b"]), arch.slope)
    feats = conv2d(x, params["head.w"], params["head.b"])
    return feats.reshape(feats.shape[1:]) if single else feats


def ema_update(teacher: Mapping[str, Tensor], student: Mapping[str, Tensor], decay: float) -> None:
    """In place: teacher <- decay * teacher + (1 - decay) * student, per tensor.

    Written as ``t + (1 - decay) * (s - t)`` so that ``s == t`` is an exact fixed point.
    """
    if not 0.0 <= decay < 1.0:
        raise ContractError(f"EMA decay must lie in [0, 1), got {decay}")
    if set(teacher) != set(student):
        missing = sorted(set(teacher) ^ set(student))
        raise ContractError(f"teacher/student structure mismatch at {missing[0]}")
    for name, s in student.items():
        t = teacher[name]
        if t.shape != s.shape:
            raise ContractError(f"teacher/student shape mismatch at {name}: {t.shape} vs {s.shape}")
    for name, s in student.items():
        t = teacher[name]
        if decay == 0.0:
            t.data = s.data.copy()
        else:
            t.data = (t.data + (1.0 - decay) * (s.data - t.data)).astype(t.data.dtype)


def clone_params(params: Mapping[str, Tensor], requires_grad: bool = False) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in params.items()}
