"""Rank-4 tensor primitives with exact backward passes.

Tensors are plain ``numpy`` arrays laid out as ``(batch, channel, height,
width)``.  Parameters and activations are ``float32``; every reduction is
carried out in ``float64`` and rounded back to the input dtype, so passing
``float64`` arrays gives a full double-precision path (used by the gradient
checks).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACC = np.float64


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


def check_tensor(x: np.ndarray, name: str = "input") -> np.ndarray:
    if not isinstance(x, np.ndarray):
        raise TypeError(f"{name} must be a numpy array, got {type(x).__name__}")
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    if x.dtype not in (np.float32, np.float64):
        raise TypeError(f"{name} must be float32 or float64, got {x.dtype}")
    return x


def effective_kernel(k: int, r: int) -> int:
    """Spatial extent covered by a ``k``-tap kernel with dilation ``r``."""
    if k < 1 or r < 1:
        raise ValueError(f"kernel and dilation must be >= 1, got k={k}, r={r}")
    return k + (k - 1) * (r - 1)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    dilation: int = 1
    stride: int = 1
    groups: int = 1
    padding: Optional[int] = None
    has_bias: bool = True

    def __post_init__(self):
        for field_name in ("in_channels", "out_channels", "kernel", "dilation", "stride", "groups"):
            if getattr(self, field_name) < 1:
                raise ValueError(f"{field_name} must be >= 1, got {getattr(self, field_name)}")
        if self.kernel % 2 == 0:
            raise ValueError(f"even kernel sizes are not supported (k={self.kernel})")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels} -> {self.out_channels}) "
                f"not divisible by groups={self.groups}"
            )
        if self.padding is None:
            object.__setattr__(self, "padding", (self.k_eff - 1) // 2)
        elif self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def k_eff(self) -> int:
        return effective_kernel(self.kernel, self.dilation)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        p, ke, s = self.padding, self.k_eff, self.stride
        return (h + 2 * p - ke) // s + 1, (w + 2 * p - ke) // s + 1


def _check_conv(x, weight, bias, spec: ConvSpec):
    check_tensor(x)
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"weight shape {weight.shape} != expected {spec.weight_shape}")
    if spec.has_bias:
        if bias is None or bias.shape != (spec.out_channels,):
            raise ShapeError(f"bias must have shape ({spec.out_channels},)")
    elif bias is not None:
        raise ShapeError("bias given for a convolution without bias")
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"non-positive output size {ho}x{wo} for input {x.shape[2]}x{x.shape[3]} "
            f"with k_eff={spec.k_eff}, padding={spec.padding}, stride={spec.stride}"
        )
    return ho, wo


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    xp = x.astype(ACC)
    if p:
        xp = np.pad(xp, ((0, 0), (0, 0), (p, p), (p, p)))
    return xp


def _im2col(xp: np.ndarray, k: int, r: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Gather dilated/strided taps into channel-major ``(c, k*k, n*ho*wo)`` columns."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=ACC)
    src = xp.transpose(1, 0, 2, 3)
    ys, xs = (ho - 1) * s + 1, (wo - 1) * s + 1
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = src[:, :, i * r:i * r + ys:s, j * r:j * r + xs:s]
    return cols.reshape(c, k * k, n * ho * wo)


# Narrow layers are memory-bound under im2col; they use the direct kernels.
DIRECT_MAX_OUT = 8
CONV_METHODS = ("auto", "gemm", "direct")


def _use_direct(spec: ConvSpec, method: str) -> bool:
    if method not in CONV_METHODS:
        raise ValueError(f"unknown conv method {method!r}")
    if method == "auto":
        return spec.kernel > 1 and spec.out_channels // spec.groups <= DIRECT_MAX_OUT
    return method == "direct"


def conv2d(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray], spec: ConvSpec,
           method: str = "auto") -> np.ndarray:
    """Zero-padded dilated, strided, grouped 2-D convolution (cross-correlation)."""
    ho, wo = _check_conv(x, weight, bias, spec)
    n = x.shape[0]
    if _use_direct(spec, method):
        from . import _direct

        out = np.zeros((n, spec.out_channels, ho, wo), dtype=ACC)
        _direct.conv_forward(_pad(x, spec.padding), weight.astype(ACC), out,
                             spec.dilation, spec.stride, spec.groups)
        if bias is not None:
            out += bias.astype(ACC)[None, :, None, None]
        return out.astype(x.dtype)
    g, k = spec.groups, spec.kernel
    cg, og = spec.in_channels // g, spec.out_channels // g
    cols = _im2col(_pad(x, spec.padding), k, spec.dilation, spec.stride, ho, wo)
    w64 = weight.astype(ACC).reshape(spec.out_channels, cg * k * k)
    out = np.empty((spec.out_channels, n * ho * wo), dtype=ACC)
    for gi in range(g):
        cg_cols = cols[gi * cg:(gi + 1) * cg].reshape(cg * k * k, n * ho * wo)
        np.matmul(w64[gi * og:(gi + 1) * og], cg_cols, out=out[gi * og:(gi + 1) * og])
    if bias is not None:
        out += bias.astype(ACC)[:, None]
    out = out.reshape(spec.out_channels, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray, spec: ConvSpec,
                    method: str = "auto"):
    """Adjoints of :func:`conv2d`.

    Returns ``(grad_input, grad_weight, grad_bias)``; ``grad_bias`` is ``None``
    when ``spec.has_bias`` is false.
    """
    check_tensor(x)
    if x.shape[1] != spec.in_channels or weight.shape != spec.weight_shape:
        raise ShapeError("input/weight do not match the convolution spec")
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    n = x.shape[0]
    if grad_out.shape != (n, spec.out_channels, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {(n, spec.out_channels, ho, wo)}")
    g, k, r, s, p = spec.groups, spec.kernel, spec.dilation, spec.stride, spec.padding
    cg, og = spec.in_channels // g, spec.out_channels // g
    kk, npix = cg * k * k, n * ho * wo
    xp = _pad(x, p)
    h, w = x.shape[2], x.shape[3]
    if _use_direct(spec, method):
        from . import _direct

        g64 = grad_out.astype(ACC)
        w64 = weight.astype(ACC)
        grad_xp = np.zeros_like(xp)
        grad_w = np.empty(spec.weight_shape, dtype=ACC)
        _direct.conv_grad_input(g64, w64, grad_xp, r, s, g)
        _direct.conv_grad_weight(g64, xp, grad_w, r, s, g)
        grad_b = g64.sum(axis=(0, 2, 3)).astype(weight.dtype) if spec.has_bias else None
        return (grad_xp[:, :, p:p + h, p:p + w].astype(x.dtype), grad_w.astype(weight.dtype), grad_b)
    cols = _im2col(xp, k, r, s, ho, wo)
    g64 = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3), dtype=ACC).reshape(spec.out_channels, npix)
    w64 = weight.astype(ACC).reshape(spec.out_channels, kk)

    grad_w = np.empty((spec.out_channels, kk), dtype=ACC)
    grad_cols = np.empty((spec.in_channels, k * k, npix), dtype=ACC)
    for gi in range(g):
        o_sl, c_sl = slice(gi * og, (gi + 1) * og), slice(gi * cg, (gi + 1) * cg)
        cg_cols = cols[c_sl].reshape(kk, npix)
        grad_w[o_sl] = g64[o_sl] @ cg_cols.T
        grad_cols[c_sl] = (w64[o_sl].T @ g64[o_sl]).reshape(cg, k * k, npix)

    grad_xp = np.zeros((spec.in_channels, n) + xp.shape[2:], dtype=ACC)
    grad_cols = grad_cols.reshape(spec.in_channels, k, k, n, ho, wo)
    ys, xs = (ho - 1) * s + 1, (wo - 1) * s + 1
    for i in range(k):
        for j in range(k):
            grad_xp[:, :, i * r:i * r + ys:s, j * r:j * r + xs:s] += grad_cols[:, i, j]
    grad_x = grad_xp[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)

    grad_b = g64.sum(axis=1).astype(weight.dtype) if spec.has_bias else None
    return (np.ascontiguousarray(grad_x, dtype=x.dtype),
            grad_w.reshape(spec.weight_shape).astype(weight.dtype), grad_b)


def prelu(x: np.ndarray, slopes: np.ndarray) -> np.ndarray:
    check_tensor(x)
    if slopes.shape != (x.shape[1],):
        raise ShapeError(f"expected {x.shape[1]} slopes, got shape {slopes.shape}")
    a = slopes.astype(x.dtype)[None, :, None, None]
    return np.where(x > 0, x, a * x)


def prelu_backward(grad_out: np.ndarray, x: np.ndarray, slopes: np.ndarray):
    """Returns ``(grad_input, grad_slopes)``."""
    if grad_out.shape != x.shape:
        raise ShapeError("grad_out shape must equal input shape")
    pos = x > 0
    a = slopes.astype(x.dtype)[None, :, None, None]
    grad_x = np.where(pos, grad_out, a * grad_out)
    contrib = np.where(pos, 0.0, x.astype(ACC) * grad_out.astype(ACC))
    return grad_x, contrib.sum(axis=(0, 2, 3)).astype(slopes.dtype)


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = BN_EPS):
    """Normalise with batch statistics.

    Returns ``(out, cache)`` where ``cache = (xhat, inv_std, mean, var)`` and
    ``var`` is the biased batch variance.
    """
    check_tensor(x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    if n * h * w < 2:
        raise ShapeError("batch norm in train mode needs at least 2 values per channel")
    x64 = x.astype(ACC)
    mean = x64.mean(axis=(0, 2, 3))
    centered = x64 - mean[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std[None, :, None, None]
    out = xhat * gamma.astype(ACC)[None, :, None, None] + beta.astype(ACC)[None, :, None, None]
    return out.astype(x.dtype), (xhat, inv_std, mean, var)


def batch_norm_eval(x, gamma, beta, running_mean, running_var, eps: float = BN_EPS):
    check_tensor(x)
    c = x.shape[1]
    for arr in (gamma, beta, running_mean, running_var):
        if arr.shape != (c,):
            raise ShapeError(f"batch norm parameters must have shape ({c},)")
    scale = gamma.astype(ACC) / np.sqrt(running_var.astype(ACC) + eps)
    shift = beta.astype(ACC) - running_mean.astype(ACC) * scale
    out = x.astype(ACC) * scale[None, :, None, None] + shift[None, :, None, None]
    return out.astype(x.dtype)


def batch_norm_backward(grad_out: np.ndarray, cache, gamma: np.ndarray):
    """Exact train-mode adjoint; returns ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std = cache[0], cache[1]
    if grad_out.shape != xhat.shape:
        raise ShapeError("grad_out shape must equal the normalised input shape")
    g = grad_out.astype(ACC)
    m = g.shape[0] * g.shape[2] * g.shape[3]
    sum_g = g.sum(axis=(0, 2, 3))
    sum_gx = (g * xhat).sum(axis=(0, 2, 3))
    k = (gamma.astype(ACC) * inv_std / m)[None, :, None, None]
    grad_x = k * (m * g - sum_g[None, :, None, None] - xhat * sum_gx[None, :, None, None])
    return grad_x.astype(grad_out.dtype), sum_gx.astype(gamma.dtype), sum_g.astype(gamma.dtype)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor(a, "a")
    check_tensor(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    if a.dtype != b.dtype:
        raise TypeError("concatenated tensors must share a dtype")
    return np.concatenate([a, b], axis=1)


def split_channels(x: np.ndarray, first: int):
    """Inverse of :func:`concat_channels` (also its adjoint)."""
    if not 0 < first < x.shape[1]:
        raise ShapeError(f"split point {first} outside (0, {x.shape[1]})")
    return x[:, :first].copy(), x[:, first:].copy()


def interp_matrix(in_size: int, out_size: int) -> np.ndarray:
    """``(out_size, in_size)`` linear interpolation weights, align-corners false."""
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=ACC) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    m = np.zeros((out_size, in_size), dtype=ACC)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize to any positive size (no antialiasing)."""
    check_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size must be positive, got {out_h}x{out_w}")
    ah = interp_matrix(x.shape[2], out_h)
    aw = interp_matrix(x.shape[3], out_w)
    out = np.matmul(np.matmul(ah, x.astype(ACC)), aw.T)
    return out.astype(x.dtype)


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    check_tensor(x)
    if out_h < x.shape[2] or out_w < x.shape[3]:
        raise ShapeError(f"upsampling cannot shrink {x.shape[2]}x{x.shape[3]} to {out_h}x{out_w}")
    if (out_h, out_w) == x.shape[2:]:
        return x.copy()
    return resize_bilinear(x, out_h, out_w)


def bilinear_upsample_backward(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Transposed interpolation: the exact adjoint of :func:`bilinear_upsample`."""
    out_h, out_w = grad_out.shape[2:]
    if (out_h, out_w) == (in_h, in_w):
        return grad_out.copy()
    ah = interp_matrix(in_h, out_h)
    aw = interp_matrix(in_w, out_w)
    g = np.matmul(np.matmul(ah.T, grad_out.astype(ACC)), aw)
    return g.astype(grad_out.dtype)


def _pool_windows(x: np.ndarray, window: int, stride: int):
    check_tensor(x)
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if window > x.shape[2] or window > x.shape[3]:
        raise ShapeError(f"pool window {window} larger than input {x.shape[2]}x{x.shape[3]}")
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.reshape(n, c, ho, wo, window * window)


def max_pool(x: np.ndarray, window: int, stride: int):
    """Returns ``(out, argmax)``; ``argmax`` indexes the flattened window (first max on ties)."""
    win = _pool_windows(x, window, stride)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out.copy(), idx


def max_pool_backward(grad_out: np.ndarray, argmax: np.ndarray, in_shape, window: int, stride: int):
    n, c, h, w = in_shape
    ho, wo = grad_out.shape[2:]
    dy, dx = np.divmod(argmax, window)
    rows = np.arange(ho)[None, None, :, None] * stride + dy
    cols = np.arange(wo)[None, None, None, :] * stride + dx
    plane = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
    flat = (plane + rows * w + cols).ravel()
    g = np.bincount(flat, weights=grad_out.astype(ACC).ravel(), minlength=n * c * h * w)
    return g.reshape(in_shape).astype(grad_out.dtype)


def avg_pool(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    win = _pool_windows(x, window, stride)
    return win.astype(ACC).mean(axis=-1).astype(x.dtype)


def avg_pool_backward(grad_out: np.ndarray, in_shape, window: int, stride: int) -> np.ndarray:
    n, c, h, w = in_shape
    g = np.zeros(in_shape, dtype=ACC)
    share = grad_out.astype(ACC) / (window * window)
    ho, wo = grad_out.shape[2:]
    for i in range(window):
        for j in range(window):
            g[:, :, i:i + (ho - 1) * stride + 1:stride, j:j + (wo - 1) * stride + 1:stride] += share
    return g.astype(grad_out.dtype)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits.astype(ACC)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
