"""Linear and prototype cosine-similarity heads, prototype blending, label correction."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .rng import Rng
from .tensor import DimensionError, Tensor, clip, conv2d, default_dtype, softmax, sqrt, tsum

_NORM_FLOOR = 1e-12


def init_heads(num_classes: int, feat_channels: int, rng: Rng) -> dict[str, Tensor]:
    """Linear head plus two independently drawn unit-norm prototype sets."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    dtype = default_dtype()
    std = 1.0 / math.sqrt(feat_channels)

    def unit_rows(stream: Rng) -> np.ndarray:
        w = stream.normal(0.0, 1.0, (num_classes, feat_channels))
        return (w / np.linalg.norm(w, axis=1, keepdims=True)).astype(dtype)

    return {
        "linear_w": Tensor(rng.split(0).normal(0.0, std, (num_classes, feat_channels)).astype(dtype), requires_grad=True),
        "linear_b": Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True),
        "proto_w1": Tensor(unit_rows(rng.split(1)), requires_grad=True),
        "proto_w2": Tensor(unit_rows(rng.split(2)), requires_grad=True),
    }


def _pixel_projection(ft: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if ft.shape[-3] != w.shape[1]:
        raise DimensionError(f"feature channels {ft.shape[-3]} do not match head width {w.shape[1]}")
    return conv2d(ft, w.reshape(w.shape + (1, 1)), b)


def linear_forward(ft, weight, bias=None) -> Tensor:
    """Per-pixel affine map followed by a softmax over classes."""
    ft = ft if isinstance(ft, Tensor) else Tensor(ft)
    weight = weight if isinstance(weight, Tensor) else Tensor(weight)
    if bias is not None and not isinstance(bias, Tensor):
        bias = Tensor(bias)
    return softmax(_pixel_projection(ft, weight, bias), axis=-3)


def _l2_normalize(x: Tensor, axis: int) -> Tensor:
    # floor keeps zero vectors at zero, so their cosine with anything is 0
    norm = sqrt(tsum(x * x, axis=axis, keepdims=True))
    return x / clip(norm, _NORM_FLOOR, None)


def cossim_logits(ft, proto, tau_temp: float) -> Tensor:
    ft = ft if isinstance(ft, Tensor) else Tensor(ft)
    proto = proto if isinstance(proto, Tensor) else Tensor(proto)
    if tau_temp <= 0:
        raise ValueError(f"temperature must be positive, got {tau_temp}")
    fn = _l2_normalize(ft, axis=-3)
    pn = _l2_normalize(proto, axis=1)
    return _pixel_projection(fn, pn) * (1.0 / tau_temp)


def cossim_forward(ft, proto, tau_temp: float) -> Tensor:
    """Softmax over classes of cosine(feature, prototype) / tau_temp."""
    return softmax(cossim_logits(ft, proto, tau_temp), axis=-3)


def lambda_sim(t: int, t_max: int) -> float:
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    return math.exp(-5.0 * (1.0 - t / t_max))


def blend_weights(w1, w2, t: int, t_max: int):
    """Virtual-domain, real-domain and averaged prototypes.

    Works on Tensors (differentiable) or arrays. At t = t_max all three coincide.
    """
    lam = lambda_sim(t, t_max)
    denom = 3.0 + lam
    w_v = (2.0 * w1 + (1.0 + lam) * w2) * (1.0 / denom)
    w_r = (2.0 * w2 + (1.0 + lam) * w1) * (1.0 / denom)
    w_avg = (w1 + w2) * 0.5
    return w_v, w_r, w_avg


def pplc(p_c: np.ndarray, p_l: np.ndarray, tau: float, class_axis: int = -3) -> np.ndarray:
    """Keep the cosine-head prediction wherever its best foreground class exceeds ``tau``."""
    p_c = np.asarray(p_c)
    p_l = np.asarray(p_l)
    if p_c.shape != p_l.shape:
        raise DimensionError(f"probability maps differ: {p_c.shape} vs {p_l.shape}")
    if p_c.shape[class_axis] < 2:
        raise ValueError("label correction needs a background and at least one foreground class")
    fore = np.take(p_c, np.arange(1, p_c.shape[class_axis]), axis=class_axis)
    confident = fore.max(axis=class_axis, keepdims=True) > tau
    return np.where(confident, p_c, p_l)


def head_params(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if k.startswith(("linear_", "proto_"))}
