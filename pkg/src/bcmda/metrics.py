"""Overlap and surface-distance segmentation metrics."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .tensor import DimensionError

_FOUR_NEIGHBORS = ndimage.generate_binary_structure(2, 1)


def _check(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def overlap_metrics(pred, gt) -> tuple[float, float]:
    """(dice, jaccard); both-empty counts as a perfect match."""
    pred, gt = _check(pred, gt)
    inter = int(np.logical_and(pred, gt).sum())
    sp, sg = int(pred.sum()), int(gt.sum())
    if sp == 0 and sg == 0:
        return 1.0, 1.0
    union = sp + sg - inter
    return 2.0 * inter / (sp + sg), inter / union


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the foreground (image edge counts)."""
    mask = np.asarray(mask).astype(bool)
    eroded = ndimage.binary_erosion(mask, structure=_FOUR_NEIGHBORS, border_value=0)
    return mask & ~eroded


def directed_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance from each boundary pixel of ``src`` to the nearest boundary pixel of ``dst``."""
    b_src, b_dst = boundary(src), boundary(dst)
    dist = ndimage.distance_transform_edt(~b_dst)
    return dist[b_src]


def nearest_rank(values: np.ndarray, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    k = max(int(math.ceil(q * len(v))) - 1, 0)
    return float(v[k])


def surface_metrics(pred, gt, pooled: bool = False) -> tuple[float, float]:
    """(hd95, asd) in pixels.

    hd95 is the larger of the two directed 95th percentiles (nearest rank), or the
    percentile of both directions pooled when ``pooled``. asd averages all
    directed distances from both sides. Both empty -> (0, 0); one empty -> the
    image diagonal for both.
    """
    pred, gt = _check(pred, gt)
    ep, eg = not pred.any(), not gt.any()
    if ep and eg:
        return 0.0, 0.0
    if ep or eg:
        diag = float(math.hypot(*pred.shape))
        return diag, diag
    d_pg = directed_distances(pred, gt)
    d_gp = directed_distances(gt, pred)
    both = np.concatenate([d_pg, d_gp])
    if pooled:
        hd95 = nearest_rank(both, 0.95)
    else:
        hd95 = max(nearest_rank(d_pg, 0.95), nearest_rank(d_gp, 0.95))
    return hd95, float(both.mean())


def class_metrics(
    pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int, pooled: bool = False
) -> dict[int, dict[str, float]]:
    """Per foreground class metrics for one label map pair."""
    out = {}
    for c in range(1, num_classes):
        p, g = pred_labels == c, gt_labels == c
        dice, jac = overlap_metrics(p, g)
        hd95, asd = surface_metrics(p, g, pooled)
        out[c] = {"dice": dice, "jaccard": jac, "hd95": hd95, "asd": asd}
    return out
