"""Median-frequency-balanced class weights and weighted cross-entropy."""
from __future__ import annotations

from typing import Optional

import numpy as np


def mfb_weights(freqs) -> np.ndarray:
    """``median(f) / f_c`` per class.

    Classes with zero frequency are left out of the median and get weight 0.
    An even number of counted classes uses the mean of the two middle values.
    """
    f = np.asarray(freqs, dtype=np.float64)
    if f.ndim != 1 or f.size == 0:
        raise ValueError("frequency vector must be 1-D and non-empty")
    if np.any(f < 0) or not np.all(np.isfinite(f)):
        raise ValueError("frequencies must be finite and non-negative")
    present = f > 0
    if not present.any():
        raise ValueError("at least one class needs a positive frequency")
    med = np.median(f[present])
    w = np.zeros_like(f)
    w[present] = med / f[present]
    return w


def class_frequencies(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("no labelled pixels to compute frequencies from")
    return counts / total


def weighted_ce_loss(logits: np.ndarray, labels: np.ndarray, weights,
                     ignore_id: Optional[int] = None):
    """Weighted pixel-wise cross-entropy averaged over non-ignored pixels.

    Returns ``(loss, grad_logits)`` with ``grad_logits`` in the logits dtype.
    """
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} != {(n, h, w)}")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (c,):
        raise ValueError(f"expected {c} class weights, got {weights.shape}")
    valid = np.ones(labels.shape, dtype=bool) if ignore_id is None else labels != ignore_id
    lab = labels[valid]
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise ValueError(f"label values must lie in [0, {c}) or equal ignore_id={ignore_id}")
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)

    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    pix_w = np.where(valid, weights[safe], 0.0)
    loss = float(-(pix_w * picked).sum() / count)

    grad = np.exp(logp)
    np.put_along_axis(grad, safe[:, None],
                      np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
    grad *= (pix_w / count)[:, None]
    return loss, grad.astype(logits.dtype)
