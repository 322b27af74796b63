"""Pseudo labels, supervision packs and the masked CE + Dice objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, clip, log, tsum

PROB_FLOOR = 1e-7
DICE_EPS = 1e-5


@dataclass
class SupervisionPack:
    """Targets for one mixed branch; arrays are (N×)C×H×W, ``filter`` is (N×)H×W."""

    target: np.ndarray
    confidence: np.ndarray
    filter: np.ndarray


def one_hot(labels: np.ndarray, num_classes: int, class_axis: int = -3) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64)
    out = np.eye(num_classes, dtype=np.float32)[labels]
    return np.moveaxis(out, -1, class_axis)


def pseudo_label(p, class_axis: int = -3) -> np.ndarray:
    """Argmax one-hot; ties go to the lowest class index."""
    p = p.data if isinstance(p, Tensor) else np.asarray(p)
    idx = p.argmax(axis=class_axis)
    return one_hot(idx, p.shape[class_axis], class_axis).astype(p.dtype)


def avg_probability(p_cr_wv: np.ndarray, p_cr_w: np.ndarray, same_domain=False) -> np.ndarray:
    """Mean of the corrected virtual and real predictions.

    ``same_domain`` may be a bool or a per-sample boolean vector; where set, the
    real-view prediction is used on its own.
    """
    if p_cr_wv.shape != p_cr_w.shape:
        raise DimensionError(f"probability maps differ: {p_cr_wv.shape} vs {p_cr_w.shape}")
    avg = 0.5 * (p_cr_wv + p_cr_w)
    same = np.asarray(same_domain, dtype=bool)
    if same.ndim == 0:
        return p_cr_w if same else avg
    same = same.reshape((-1,) + (1,) * (p_cr_w.ndim - 1))
    return np.where(same, p_cr_w, avg)


def filter_mask(p_avg: np.ndarray, tau: float, class_axis: int = -3) -> np.ndarray:
    return (np.asarray(p_avg).max(axis=class_axis) > tau).astype(np.float32)


def _pixel_count(p: Tensor) -> int:
    return p.shape[-1] * p.shape[-2]


def _batch_count(p: Tensor) -> int:
    return int(np.prod(p.shape[:-3])) if p.ndim > 3 else 1


def _expand_mask(m: np.ndarray, p: Tensor) -> np.ndarray:
    m = np.asarray(m, dtype=p.dtype)
    return np.expand_dims(m, -3)


def masked_ce(y: np.ndarray, p: Tensor, m: np.ndarray) -> Tensor:
    """-(1/HW) sum_i m_i y_i log p_i, averaged over the batch."""
    if np.shape(y) != p.shape:
        raise DimensionError(f"target {np.shape(y)} vs prediction {p.shape}")
    w = np.asarray(y, dtype=p.dtype) * _expand_mask(m, p)
    total = tsum(log(clip(p, PROB_FLOOR, 1.0)) * w)
    return total * (-1.0 / (_pixel_count(p) * _batch_count(p)))


def masked_dice(y: np.ndarray, p: Tensor, m: np.ndarray, mode: str = "joint") -> Tensor:
    """1 - (2 sum m p y + eps) / (sum m (p^2 + y^2) + eps).

    ``joint`` sums every channel and pixel of the batch into one fraction;
    ``per_class`` computes the fraction per class and averages.
    """
    if np.shape(y) != p.shape:
        raise DimensionError(f"target {np.shape(y)} vs prediction {p.shape}")
    y = np.asarray(y, dtype=p.dtype)
    m = _expand_mask(m, p)
    if mode == "joint":
        inter = tsum(p * (y * m))
        denom = tsum(p * p * m) + float((y * y * m).sum())
        return 1.0 - (inter * 2.0 + DICE_EPS) / (denom + DICE_EPS)
    if mode == "per_class":
        axes = tuple(i for i in range(p.ndim) if i != p.ndim - 3)
        inter = tsum(p * (y * m), axis=axes)
        denom = tsum(p * p * m, axis=axes) + (y * y * m).sum(axis=axes)
        frac = (inter * 2.0 + DICE_EPS) / (denom + DICE_EPS)
        return 1.0 - tsum(frac) * (1.0 / p.shape[-3])
    raise ValueError(f"unknown dice mode {mode!r}")


def seg_loss(y: np.ndarray, p: Tensor, m: np.ndarray, dice_mode: str = "joint") -> Tensor:
    return masked_ce(y, p, m) + masked_dice(y, p, m, dice_mode)


BRANCHES = ("in1", "out1", "in2", "out2")


def composite_loss(
    packs: Sequence[SupervisionPack],
    preds: Sequence[tuple[Tensor, Tensor | None]],
    dice_mode: str = "joint",
) -> tuple[Tensor, dict[str, float]]:
    """Total objective over the four mixed branches (in1, out1, in2, out2).

    ``preds[k]`` is ``(linear_probs, cosine_probs)``; each branch averages the two
    heads' losses (the cosine term is skipped when it is ``None``), and the total
    is 1/2 (in1 + out1) + 1/2 (in2 + out2).
    """
    if len(packs) != 4 or len(preds) != 4:
        raise ContractError(f"expected 4 branches, got {len(packs)} packs and {len(preds)} predictions")
    branch = []
    for pack, (p_lin, p_cos) in zip(packs, preds):
        loss = seg_loss(pack.target, p_lin, pack.filter, dice_mode)
        if p_cos is not None:
            loss = (loss + seg_loss(pack.target, p_cos, pack.filter, dice_mode)) * 0.5
        branch.append(loss)
    total = (branch[0] + branch[1]) * 0.5 + (branch[2] + branch[3]) * 0.5
    parts = {name: float(b.data) for name, b in zip(BRANCHES, branch)}
    return total, parts
