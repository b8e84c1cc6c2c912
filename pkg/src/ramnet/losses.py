"""Depth losses in normalized log-depth space and metric-depth evaluation."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import (Tensor, _make, absolute, add, avg_downsample2x, mul, sobel_gradients,
                     sub, sum_per_sample)

GRAD_WEIGHT = 0.25
GRAD_SCALES = 4


def _as_mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} does not match prediction {shape}")
    return mask


def _residual(pred: Tensor, gt, mask: np.ndarray) -> Tensor:
    gt = np.where(mask, np.asarray(gt, dtype=pred.dtype), 0).astype(pred.dtype)
    return sub(pred, Tensor(gt, dtype=pred.dtype))


def scale_invariant_loss(pred: Tensor, gt, mask=None) -> Tensor:
    """Per-sample ``sum(R^2)/n - (sum R)^2/n^2`` over valid pixels, batch-averaged.

    Evaluated in the equivalent centred form ``mean((R - mean R)^2)`` in
    float64, which avoids cancellation and keeps the value exactly invariant
    to constant offsets of the prediction.
    """
    if pred.shape != np.shape(gt):
        raise ValueError(f"prediction {pred.shape} and target {np.shape(gt)} differ in shape")
    mask = _as_mask(mask, pred.shape)
    n_img = pred.shape[0]
    m = mask.reshape(n_img, -1)
    n = m.sum(axis=1)
    if np.any(n == 0):
        raise ValueError("scale-invariant loss needs at least one valid pixel per sample")
    r = pred.data.reshape(n_img, -1).astype(np.float64) - np.asarray(gt, dtype=np.float64).reshape(n_img, -1)
    r = np.where(m, r, 0.0)
    mu = r.sum(axis=1) / n
    centred = np.where(m, r - mu[:, None], 0.0)
    per = (centred ** 2).sum(axis=1) / n
    value = np.asarray(per.mean(), dtype=pred.dtype)

    def bw(g):
        grad = (2.0 * float(g) / n_img) * centred / n[:, None]
        return (grad.reshape(pred.shape).astype(pred.dtype),)

    return _make(value, (pred,), bw)


def _erode3x3(mask: np.ndarray) -> np.ndarray:
    """Pixels whose full 3x3 neighbourhood is valid; the image border is excluded."""
    out = np.zeros_like(mask)
    h, w = mask.shape[-2:]
    if h < 3 or w < 3:
        return out
    inner = np.ones(mask.shape[:-2] + (h - 2, w - 2), dtype=bool)
    for dy in range(3):
        for dx in range(3):
            inner &= mask[..., dy:dy + h - 2, dx:dx + w - 2]
    out[..., 1:-1, 1:-1] = inner
    return out


def _downsample_mask(mask: np.ndarray) -> np.ndarray:
    n, c, h, w = mask.shape
    return mask.reshape(n, c, h // 2, 2, w // 2, 2).all(axis=(3, 5))


def gradient_matching_loss(pred: Tensor, gt, mask=None, scales: int = GRAD_SCALES) -> Tensor:
    """Multi-scale Sobel gradient matching on the log-depth residual.

    The residual is average-pooled into a pyramid; at each scale the absolute
    Sobel responses are summed over pixels whose 3x3 neighbourhood is valid
    and divided by that scale's count. Scales are summed, samples averaged.
    """
    if pred.ndim != 4:
        raise ValueError(f"expected an (N, 1, H, W) prediction, got {pred.shape}")
    h, w = pred.shape[2:]
    f = 2 ** (scales - 1)
    if h % f or w % f:
        raise ValueError(f"spatial size {h}x{w} must be divisible by {f} for {scales} scales")
    mask = _as_mask(mask, pred.shape)
    r = _residual(pred, gt, mask)
    n_img = pred.shape[0]
    total = None
    m = mask
    for s in range(scales):
        if s:
            r = avg_downsample2x(r)
            m = _downsample_mask(m)
        inner = _erode3x3(m)
        count = inner.reshape(n_img, -1).sum(axis=1)
        if not count.any():
            continue
        gx, gy = sobel_gradients(r)
        keep = Tensor(inner, dtype=pred.dtype)
        per = sum_per_sample(mul(add(absolute(gx), absolute(gy)), keep))
        inv = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0)
        term = mul(per, Tensor(inv, dtype=pred.dtype))
        total = term if total is None else add(total, term)
    if total is None:
        return _make(np.asarray(0.0, dtype=pred.dtype), (pred,), lambda g: (np.zeros_like(pred.data),))
    return _batch_mean(total)


def _batch_mean(v: Tensor) -> Tensor:
    n = v.shape[0]
    return _make(np.asarray(v.data.mean(), dtype=v.dtype), (v,),
                 lambda g: (np.full(v.shape, float(g) / n, dtype=v.dtype),))


def label_loss(pred: Tensor, gt, mask=None, weight: float = GRAD_WEIGHT):
    """SI + weight * gradient loss for one label; returns (total, si, grad)."""
    si = scale_invariant_loss(pred, gt, mask)
    grad = gradient_matching_loss(pred, gt, mask)
    return si + grad * weight, si, grad


def total_sequence_loss(per_label: Sequence[Sequence[tuple]], weight: float = GRAD_WEIGHT):
    """Sum ``si + weight * grad`` over labels.

    ``per_label[k]`` lists the ``(si, grad)`` pairs of every prediction
    aligned with label ``k``; they are averaged before summation, so RAM net's
    event- and frame-aligned predictions share one label's weight.
    Returns ``(total, si_sum, grad_sum)``.
    """
    if not per_label:
        raise ValueError("no labels to compute a sequence loss over")
    total = si_sum = grad_sum = None
    for k, preds in enumerate(per_label):
        if not preds:
            raise ValueError(f"label {k} has no aligned prediction")
        inv = 1.0 / len(preds)
        si = _accumulate([p[0] for p in preds]) * inv
        grad = _accumulate([p[1] for p in preds]) * inv
        term = si + grad * weight
        total = term if total is None else total + term
        si_sum = si if si_sum is None else si_sum + si
        grad_sum = grad if grad_sum is None else grad_sum + grad
    return total, si_sum, grad_sum


def _accumulate(values):
    out = values[0]
    for v in values[1:]:
        out = out + v
    return out


# ------------------------------------------------------------------ metrics

def metrics(pred_metric: np.ndarray, gt_metric: np.ndarray, mask=None,
            cutoff_m: float = math.inf) -> dict[str, float | None]:
    """Absolute relative error and mean absolute error (metres).

    Only valid pixels with ground truth up to ``cutoff_m`` count; if none
    remain both metrics are ``None``.
    """
    if cutoff_m <= 0:
        raise ValueError("cutoff must be positive")
    pred = np.asarray(pred_metric, dtype=np.float64)
    gt = np.asarray(gt_metric, dtype=np.float64)
    mask = _as_mask(mask, gt.shape) & np.isfinite(gt) & (gt > 0) & (gt <= cutoff_m)
    if not mask.any():
        return {"abs_rel": None, "mean_abs_depth_error": None}
    d = np.abs(pred[mask] - gt[mask])
    return {"abs_rel": float(np.mean(d / gt[mask])), "mean_abs_depth_error": float(np.mean(d))}


def align_log_offset(pred_norm: np.ndarray, gt_norm: np.ndarray, mask=None) -> np.ndarray:
    """Shift a normalized log-depth prediction by the mean residual on ``mask``.

    This is the offset that minimizes the scale-invariant loss, i.e. a global
    metric scale alignment.
    """
    pred = np.asarray(pred_norm, dtype=np.float64)
    mask = _as_mask(mask, pred.shape)
    if not mask.any():
        return pred.copy()
    return pred + float(np.mean(np.asarray(gt_norm, dtype=np.float64)[mask] - pred[mask]))
