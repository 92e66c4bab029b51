"""Dilated-CNN-stack blocks and dense dilated convolution merging modules."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .layers import ConvUnit, Module
from .tensor import ConvSpec, effective_kernel

__all__ = [
    "DcBlockSpec", "DdcmSpec", "DcBlock", "Ddcm",
    "effective_kernel", "fused_receptive_fields",
]

DYNAMIC = "dynamic"


@dataclass(frozen=True)
class DcBlockSpec:
    in_channels: int
    width: int
    kernel: int = 3
    dilation: int = 1
    groups: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"DC block width must be >= 1, got {self.width}")
        if self.dilation < 1 or self.stride < 1:
            raise ValueError("dilation and stride must be >= 1")
        if self.in_channels % self.groups or self.width % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} and width={self.width}")

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.width

    def conv_spec(self) -> ConvSpec:
        return ConvSpec(self.in_channels, self.width, self.kernel, self.dilation,
                        self.stride, self.groups, has_bias=True)


@dataclass(frozen=True)
class DdcmSpec:
    """A chain of DC blocks plus a 1x1 merging layer.

    ``width`` is the per-block output width m (defaults to ``out_channels``);
    ``stride`` is an int or ``"dynamic"`` (rate + 1 per block).
    ``in_channels`` is usually filled in by the network builder.
    """

    rates: tuple[int, ...]
    out_channels: int
    width: Optional[int] = None
    kernel: int = 3
    groups: int = 1
    stride: Union[int, str] = 1
    in_channels: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(int(r) for r in self.rates))
        if not self.rates:
            raise ValueError("a DDCM module needs at least one dilation rate")
        if min(self.rates) < 1:
            raise ValueError(f"dilation rates must be >= 1, got {list(self.rates)}")
        if self.width is None:
            object.__setattr__(self, "width", self.out_channels)
        if self.width < 1 or self.out_channels < 1:
            raise ValueError("block width and merge output channels must be >= 1")
        if self.stride != DYNAMIC and (not isinstance(self.stride, int) or self.stride < 1):
            raise ValueError(f"stride must be a positive int or 'dynamic', got {self.stride!r}")

    def with_input(self, in_channels: int) -> "DdcmSpec":
        return replace(self, in_channels=in_channels)

    def block_stride(self, rate: int) -> int:
        return rate + 1 if self.stride == DYNAMIC else int(self.stride)

    def blocks(self) -> list[DcBlockSpec]:
        if self.in_channels is None:
            raise ValueError("DdcmSpec.in_channels is unset")
        out, c = [], self.in_channels
        for r in self.rates:
            out.append(DcBlockSpec(c, self.width, self.kernel, r, self.groups, self.block_stride(r)))
            c += self.width
        return out

    @property
    def stack_channels(self) -> int:
        return self.in_channels + len(self.rates) * self.width

    def merge_spec(self) -> ConvSpec:
        return ConvSpec(self.stack_channels, self.out_channels, kernel=1, has_bias=True)


class DcBlock(Module):
    """``concat(BN(PReLU(conv(x))), x)``, upsampling the conv branch when strided."""

    def __init__(self, spec: DcBlockSpec, rng: np.random.Generator, order: str = "conv-prelu-bn"):
        super().__init__()
        self.spec = spec
        self.unit = self.add_child("unit", ConvUnit(spec.conv_spec(), rng, order))
        self._hw = None
        self._inner_hw = None

    def forward(self, x, train=False):
        if x.shape[1] != self.spec.in_channels:
            raise T.ShapeError(f"DC block expects {self.spec.in_channels} channels, got {x.shape[1]}")
        y = self.unit.forward(x, train)
        self._hw, self._inner_hw = x.shape[2:], y.shape[2:]
        if self.spec.stride > 1:
            y = T.bilinear_upsample(y, *x.shape[2:])
        return T.concat_channels(y, x)

    def backward(self, grad):
        gy, gx = T.split_channels(grad, self.spec.width)
        if self.spec.stride > 1:
            gy = T.bilinear_upsample_backward(gy, *self._inner_hw)
        return gx + self.unit.backward(gy)


class Ddcm(Module):
    def __init__(self, spec: DdcmSpec, rng: np.random.Generator, order: str = "conv-prelu-bn"):
        super().__init__()
        self.spec = spec
        self.blocks = [self.add_child(f"block{i}", DcBlock(b, rng, order))
                       for i, b in enumerate(spec.blocks())]
        self.merge = self.add_child("merge", ConvUnit(spec.merge_spec(), rng, order))

    def forward(self, x, train=False):
        for block in self.blocks:
            x = block.forward(x, train)
        return self.merge.forward(x, train)

    def backward(self, grad):
        grad = self.merge.backward(grad)
        for block in reversed(self.blocks):
            grad = block.backward(grad)
        return grad


def fused_receptive_fields(k: int, rates) -> tuple[list[list[int]], list[int]]:
    """Receptive fields of each DC block's output and of the merged stack.

    Block ``i`` sees ``[x_{i-1}, ..., x_0]``; each stacked feature map is
    represented by its own (largest) receptive field, enlarged by
    ``k_eff - 1``.  The merged list is the descending union including the
    raw input's field of 1.  Unit stride is assumed.
    """
    rates = list(rates)
    if not rates:
        raise ValueError("rates must be non-empty")
    layer_rf = [1]
    per_layer = []
    for r in rates:
        grow = effective_kernel(k, r) - 1
        fields = [rf + grow for rf in reversed(layer_rf)]
        per_layer.append(fields)
        layer_rf.append(fields[0])
    merged = sorted({1}.union(*per_layer), reverse=True)
    return per_layer, merged
