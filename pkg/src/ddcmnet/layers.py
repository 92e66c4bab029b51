"""Stateful layer wrappers around :mod:`ddcmnet.tensor`.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``Param.grad`` during ``backward``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ConvSpec

WEIGHT, BIAS, NORM = "weight", "bias", "norm"
BLOCK_ORDERS = ("conv-prelu-bn", "conv-bn-prelu")


@dataclass
class Param:
    data: np.ndarray
    kind: str
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.grad = np.zeros_like(self.data)


class Module:
    def __init__(self):
        self._params: dict[str, Param] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, data: np.ndarray, kind: str) -> Param:
        p = Param(data, kind)
        self._params[name] = p
        return p

    def add_buffer(self, name: str, data: np.ndarray) -> None:
        self._buffers[name] = np.ascontiguousarray(data, dtype=np.float32)

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        if rest:
            self._children[head].set_buffer(rest, value)
        else:
            if self._buffers[head].shape != value.shape:
                raise T.ShapeError(f"buffer {dotted}: shape {value.shape} != {self._buffers[head].shape}")
            self._buffers[head] = np.ascontiguousarray(value, dtype=np.float32)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad[...] = 0.0

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    __call__ = forward


class Conv2d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * spec.kernel * spec.kernel
        w = rng.standard_normal(spec.weight_shape) * math.sqrt(2.0 / fan_in)
        self.weight = self.add_param("weight", w, WEIGHT)
        self.bias = self.add_param("bias", np.zeros(spec.out_channels), BIAS) if spec.has_bias else None
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return T.conv2d(x, self.weight.data.astype(x.dtype),
                        None if self.bias is None else self.bias.data.astype(x.dtype), self.spec)

    def backward(self, grad):
        gx, gw, gb = T.conv2d_backward(grad, self._x, self.weight.data.astype(self._x.dtype), self.spec)
        self.weight.grad += gw
        if self.bias is not None:
            self.bias.grad += gb
        return gx


class PReLU(Module):
    def __init__(self, channels: int, init: float = 0.25):
        super().__init__()
        self.slope = self.add_param("slope", np.full(channels, init), NORM)
        self._x = None

    def forward(self, x, train=False):
        self._x = x
        return T.prelu(x, self.slope.data)

    def backward(self, grad):
        gx, ga = T.prelu_backward(grad, self._x, self.slope.data)
        self.slope.grad += ga
        return gx


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = T.BN_EPS, momentum: float = T.BN_MOMENTUM):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = self.add_param("gamma", np.ones(channels), NORM)
        self.beta = self.add_param("beta", np.zeros(channels), NORM)
        self.add_buffer("running_mean", np.zeros(channels))
        self.add_buffer("running_var", np.ones(channels))
        self._cache = None
        self._x = None

    def forward(self, x, train=False):
        if not train:
            self._cache = None
            self._x = x
            return T.batch_norm_eval(x, self.gamma.data, self.beta.data,
                                     self._buffers["running_mean"], self._buffers["running_var"], self.eps)
        out, cache = T.batch_norm_train(x, self.gamma.data, self.beta.data, self.eps)
        _, _, mean, var = cache
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mom = self.momentum
        rm = self._buffers["running_mean"].astype(np.float64)
        rv = self._buffers["running_var"].astype(np.float64)
        self._buffers["running_mean"] = ((1 - mom) * rm + mom * mean).astype(np.float32)
        self._buffers["running_var"] = ((1 - mom) * rv + mom * var * m / (m - 1)).astype(np.float32)
        self._cache = cache
        return out

    def backward(self, grad):
        if self._cache is None:
            inv_std = 1.0 / np.sqrt(self._buffers["running_var"].astype(np.float64) + self.eps)
            g = grad.astype(np.float64)
            xhat = (self._x.astype(np.float64)
                    - self._buffers["running_mean"].astype(np.float64)[None, :, None, None]) * inv_std[None, :, None, None]
            self.gamma.grad += (g * xhat).sum(axis=(0, 2, 3)).astype(np.float32)
            self.beta.grad += g.sum(axis=(0, 2, 3)).astype(np.float32)
            scale = self.gamma.data.astype(np.float64) * inv_std
            return (g * scale[None, :, None, None]).astype(grad.dtype)
        gx, gg, gb = T.batch_norm_backward(grad, self._cache, self.gamma.data)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx


class ConvUnit(Module):
    """Convolution followed by PReLU and batch norm (order configurable)."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, order: str = "conv-prelu-bn"):
        super().__init__()
        if order not in BLOCK_ORDERS:
            raise ValueError(f"unknown block order {order!r}; expected one of {BLOCK_ORDERS}")
        self.spec, self.order = spec, order
        self.conv = self.add_child("conv", Conv2d(spec, rng))
        self.act = self.add_child("act", PReLU(spec.out_channels))
        self.bn = self.add_child("bn", BatchNorm2d(spec.out_channels))

    def _stages(self):
        if self.order == "conv-prelu-bn":
            return (self.conv, self.act, self.bn)
        return (self.conv, self.bn, self.act)

    def forward(self, x, train=False):
        for layer in self._stages():
            x = layer.forward(x, train)
        return x

    def backward(self, grad):
        for layer in reversed(self._stages()):
            grad = layer.backward(grad)
        return grad


class Pool2d(Module):
    def __init__(self, window: int, stride: int | None = None, kind: str = "max"):
        super().__init__()
        if kind not in ("max", "avg"):
            raise ValueError(f"unknown pool kind {kind!r}")
        self.window, self.stride, self.kind = window, stride or window, kind
        self._cache = None

    def forward(self, x, train=False):
        if self.kind == "max":
            out, idx = T.max_pool(x, self.window, self.stride)
            self._cache = (x.shape, idx)
        else:
            out = T.avg_pool(x, self.window, self.stride)
            self._cache = (x.shape, None)
        return out

    def backward(self, grad):
        shape, idx = self._cache
        if self.kind == "max":
            return T.max_pool_backward(grad, idx, shape, self.window, self.stride)
        return T.avg_pool_backward(grad, shape, self.window, self.stride)


class Sequential(Module):
    def __init__(self, *named: tuple[str, Module]):
        super().__init__()
        for name, m in named:
            self.add_child(name, m)

    def forward(self, x, train=False):
        for m in self._children.values():
            x = m.forward(x, train)
        return x

    def backward(self, grad):
        for m in reversed(list(self._children.values())):
            grad = m.backward(grad)
        return grad
