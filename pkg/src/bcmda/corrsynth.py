"""Bidirectional correlation maps and correlation-informed image synthesis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, no_grad, resize_bilinear


@dataclass
class CorrelationPair:
    """Column-stochastic maps of shape (W′W′, W′W′).

    ``c_xu[:, j]`` distributes unlabeled pixel ``j`` over labeled pixels;
    ``c_ux`` is the same construction with the roles swapped.
    """

    c_xu: np.ndarray
    c_ux: np.ndarray
    w_prime: int


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _downsample_flat(x: np.ndarray, w_prime: int) -> np.ndarray:
    with no_grad():
        small = resize_bilinear(Tensor(x), w_prime, w_prime).data
    return small.reshape(small.shape[:-2] + (w_prime * w_prime,))


def _column_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-2, keepdims=True)


def compute_bcm(ft_x, ft_u, w_prime: int) -> CorrelationPair:
    """Correlation maps between two feature maps (D′×H×W, or batched N×D′×H×W).

    Features are bilinearly downsampled to ``w_prime × w_prime``; the scaled dot
    products are softmax-normalised over each column. No gradients flow.
    """
    fx, fu = _data(ft_x), _data(ft_u)
    if fx.shape != fu.shape:
        raise DimensionError(f"feature maps differ: {fx.shape} vs {fu.shape}")
    if w_prime < 1 or w_prime > fx.shape[-1]:
        raise DimensionError(f"w_prime={w_prime} outside [1, {fx.shape[-1]}]")
    c_xu, c_ux = bcm_from_flat(_downsample_flat(fx, w_prime), _downsample_flat(fu, w_prime))
    return CorrelationPair(c_xu, c_ux, w_prime)


def bcm_from_flat(xd: np.ndarray, ud: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Both maps from already flattened features of shape (..., D′, P)."""
    scale = 1.0 / np.sqrt(xd.shape[-2])
    logits_xu = np.swapaxes(xd, -1, -2) @ ud * scale
    logits_ux = np.swapaxes(ud, -1, -2) @ xd * scale
    return _column_softmax(logits_xu), _column_softmax(logits_ux)


def project_pixels(src: np.ndarray, corr: np.ndarray) -> np.ndarray:
    """Each output pixel is a convex combination of source pixels: (..., D, P) @ (P, P)."""
    colsum = corr.sum(axis=-2)
    if np.any(np.abs(colsum - 1.0) > 1e-3) or np.any(corr < 0):
        raise ContractError("correlation map is not column-stochastic")
    return src @ corr


def synthesize_flat(image, corr: np.ndarray) -> np.ndarray:
    """Pre-upsampling synthesis: source pixels (D×W′W′ after downsampling) times ``corr``."""
    img = _data(image)
    n_pix = corr.shape[-1]
    w_prime = int(round(np.sqrt(n_pix)))
    if w_prime * w_prime != n_pix or corr.shape[-2] != n_pix:
        raise DimensionError(f"correlation map must be square over W′×W′ pixels, got {corr.shape}")
    return project_pixels(_downsample_flat(img, w_prime), corr).astype(img.dtype)


def synthesize(image, corr: np.ndarray, target_h: int | None = None, target_w: int | None = None) -> np.ndarray:
    """Render the target's layout from ``image``'s pixels, upsampled to full size."""
    img = _data(image)
    th = img.shape[-2] if target_h is None else target_h
    tw = img.shape[-1] if target_w is None else target_w
    flat = synthesize_flat(img, corr)
    w_prime = int(round(np.sqrt(corr.shape[-1])))
    small = flat.reshape(flat.shape[:-1] + (w_prime, w_prime))
    with no_grad():
        return resize_bilinear(Tensor(small), th, tw).data
