"""Augmentations, MixUp variants and bidirectional CutMix.

Everything here is data-side: plain numpy arrays in, numpy arrays out.
Images are channel-first (D×H×W); labels and masks are H×W.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import DimensionError


class ParameterError(ValueError):
    """Invalid mixing or augmentation parameter."""


# -- schedules ---------------------------------------------------------


def gamma_schedule(t: int, t_max: int, lambda_fix: float) -> float:
    """Upper bound of the dynamic MixUp ratio: min(lambda_fix, t / t_max)."""
    if t_max < 1:
        raise ParameterError("t_max must be >= 1")
    return min(lambda_fix, t / t_max)


@dataclass
class MixSchedule:
    lambda_fix: float = 0.75
    alpha: float = 0.7
    t: int = 0
    t_max: int = 1

    @property
    def gamma(self) -> float:
        return gamma_schedule(self.t, self.t_max, self.lambda_fix)


# -- augmentation --------------------------------------------------------


@dataclass(frozen=True)
class WeakParams:
    flip_h: bool = False
    flip_v: bool = False
    shift_y: int = 0
    shift_x: int = 0


def draw_weak(h: int, w: int, rng: Rng) -> WeakParams:
    max_y, max_x = int(0.05 * h), int(0.05 * w)
    return WeakParams(
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
        shift_y=int(rng.integers(-max_y, max_y + 1)),
        shift_x=int(rng.integers(-max_x, max_x + 1)),
    )


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation over the last two axes with edge replication."""
    if dy == 0 and dx == 0:
        return a
    h, w = a.shape[-2:]
    pad = [(0, 0)] * (a.ndim - 2) + [(abs(dy), abs(dy)), (abs(dx), abs(dx))]
    p = np.pad(a, pad, mode="edge")
    y0 = abs(dy) - dy
    x0 = abs(dx) - dx
    return p[..., y0 : y0 + h, x0 : x0 + w]


def apply_weak(a: np.ndarray, params: WeakParams) -> np.ndarray:
    out = a
    if params.flip_h:
        out = out[..., :, ::-1]
    if params.flip_v:
        out = out[..., ::-1, :]
    out = _shift(out, params.shift_y, params.shift_x)
    return np.ascontiguousarray(out)


def weak_augment(image: np.ndarray, label: np.ndarray | None, rng: Rng, params: WeakParams | None = None):
    """Random flips and a small translation, applied identically to image and label."""
    if label is not None and label.shape[-2:] != image.shape[-2:]:
        raise DimensionError(f"label {label.shape} does not match image {image.shape}")
    if params is None:
        params = draw_weak(*image.shape[-2:], rng)
    out_label = None if label is None else apply_weak(label, params)
    return apply_weak(image, params), out_label


@dataclass(frozen=True)
class StrongParams:
    gamma: float = 1.0
    brightness: float = 0.0
    noise_sigma: float = 0.0


def draw_strong(rng: Rng) -> StrongParams:
    return StrongParams(
        gamma=float(rng.uniform(0.7, 1.3)),
        brightness=float(rng.uniform(-0.2, 0.2)),
        noise_sigma=float(rng.uniform(0.0, 0.1)),
    )


def strong_augment(image: np.ndarray, rng: Rng, params: StrongParams | None = None) -> np.ndarray:
    """Photometric jitter on top of an already weakly augmented image.

    Gamma acts on intensities rescaled to [0, 1]; the result is clamped to [-1, 1].
    Geometry is left alone so pseudo labels computed on the weak view stay aligned.
    """
    if params is None:
        params = draw_strong(rng)
    out = image
    if params.gamma != 1.0:
        unit = np.clip((out + 1.0) * 0.5, 0.0, 1.0)
        out = unit**params.gamma * 2.0 - 1.0
    if params.brightness != 0.0:
        out = out + params.brightness
    if params.noise_sigma > 0.0:
        out = out + rng.normal(0.0, params.noise_sigma, image.shape)
    return np.clip(out, -1.0, 1.0).astype(image.dtype)


# -- MixUp ---------------------------------------------------------------


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def mixup(real: np.ndarray, synth: np.ndarray, ratio) -> np.ndarray:
    """(1 - ratio) * real + ratio * synth; ``ratio`` may be per-sample (shape N)."""
    _check_same(real, synth)
    r = np.asarray(ratio, dtype=real.dtype)
    if r.ndim == 1:
        r = r.reshape((-1,) + (1,) * (real.ndim - 1))
    return ((1 - r) * real + r * synth).astype(real.dtype)


def fixmix(real: np.ndarray, synth: np.ndarray, lambda_fix: float) -> np.ndarray:
    if not 0.0 <= lambda_fix <= 1.0:
        raise ParameterError(f"lambda_fix must lie in [0, 1], got {lambda_fix}")
    return mixup(real, synth, lambda_fix)


def draw_lambda_dyn(sched: MixSchedule, rng: Rng, size=None):
    if sched.alpha <= 0:
        raise ParameterError(f"Beta parameter must be positive, got {sched.alpha}")
    return sched.gamma * rng.beta(sched.alpha, sched.alpha, size)


def pdmix(real: np.ndarray, synth: np.ndarray, sched: MixSchedule, rng: Rng):
    """Progressive dynamic MixUp; returns the mixed image and the drawn ratio."""
    lam = float(draw_lambda_dyn(sched, rng))
    return mixup(real, synth, lam), lam


# -- CutMix --------------------------------------------------------------


@dataclass
class CutMask:
    values: np.ndarray
    top: int
    left: int
    height: int
    width: int


AREA_RANGE = (0.25, 0.5)
ASPECT_RANGE = (0.5, 2.0)


def box_mask(h: int, w: int, top: int, left: int, height: int, width: int) -> CutMask:
    m = np.zeros((h, w), dtype=np.float32)
    m[top : top + height, left : left + width] = 1.0
    return CutMask(m, top, left, height, width)


def gen_mask(h: int, w: int, rng: Rng, max_tries: int = 100) -> CutMask:
    """One axis-aligned rectangle covering 25-50% of the image, aspect in [0.5, 2]."""
    if h < 4 or w < 4:
        raise ParameterError(f"mask extents must be >= 4, got {h}×{w}")
    lo, hi = AREA_RANGE
    for _ in range(max_tries):
        area = rng.uniform(lo, hi) * h * w
        aspect = np.exp(rng.uniform(np.log(ASPECT_RANGE[0]), np.log(ASPECT_RANGE[1])))
        bh = int(round(np.sqrt(area * aspect)))
        bw = int(round(np.sqrt(area / aspect)))
        if not (1 <= bh <= h and 1 <= bw <= w):
            continue
        if not lo <= bh * bw / (h * w) <= hi:
            continue
        if not ASPECT_RANGE[0] <= bh / bw <= ASPECT_RANGE[1]:
            continue
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        return box_mask(h, w, top, left, bh, bw)
    raise ParameterError(f"cannot place a mask with the configured area/aspect on {h}×{w}")


def bcmix(a: np.ndarray, b: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray]:
    """Bidirectional CutMix: ``inner`` pastes a's masked region into b, ``outer`` the reverse."""
    m = mask.values if isinstance(mask, CutMask) else np.asarray(mask)
    _check_same(a, b)
    if m.shape[-2:] != a.shape[-2:]:
        raise DimensionError(f"mask {m.shape} does not match {a.shape}")
    m = m.astype(a.dtype, copy=False)
    inner = a * m + b * (1 - m)
    outer = b * m + a * (1 - m)
    return inner, outer
