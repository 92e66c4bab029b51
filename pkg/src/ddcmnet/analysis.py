"""Parameter, FLOP and receptive-field accounting from specs alone.

The walker mirrors the layer graph of :class:`~ddcmnet.network.Network`
without building it, and additionally describes the residual backbones
that exist only for counting.

Cost units: every layer records multiply-adds (``macs``) and other
single-step element operations (``ops``: comparisons, activations).
Under ``mac1`` a multiply-add is one FLOP, under ``mac2`` it is two;
``ops`` count once under both.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Union

from .ddcm import DdcmSpec, fused_receptive_fields
from .network import NetworkSpec
from .tensor import ConvSpec, effective_kernel

CONVENTIONS = ("mac1", "mac2")


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int
    ops: int
    out_shape: tuple[int, int, int, int]
    state: int = 0

    def flops(self, convention: str) -> int:
        return (2 if convention == "mac2" else 1) * self.macs + self.ops


@dataclass
class CostReport:
    input_shape: tuple[int, int, int, int]
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def state(self) -> int:
        return sum(l.state for l in self.layers)

    def flops(self, convention: str = "mac1", conv_only: bool = False) -> int:
        if convention not in CONVENTIONS:
            raise ValueError(f"convention must be one of {CONVENTIONS}")
        return sum(l.flops(convention) for l in self.layers if not conv_only or l.kind == "conv")

    def params_of(self, prefix: str) -> int:
        return sum(l.params for l in self.layers if l.name == prefix or l.name.startswith(prefix + "."))


class _Walker:
    def __init__(self, n: int):
        self.n = n
        self.layers: list[LayerCost] = []

    def _add(self, name, kind, params, macs, ops, shape, state=0):
        self.layers.append(LayerCost(name, kind, int(params), int(macs), int(ops), (self.n,) + tuple(shape), state))

    def conv(self, name, spec: ConvSpec, c, h, w):
        if c != spec.in_channels:
            raise ValueError(f"{name}: expects {spec.in_channels} input channels, wiring gives {c}")
        ho, wo = spec.output_size(h, w)
        k2 = spec.kernel * spec.kernel
        params = spec.out_channels * (spec.in_channels // spec.groups) * k2
        params += spec.out_channels if spec.has_bias else 0
        macs = self.n * ho * wo * spec.out_channels * (spec.in_channels // spec.groups) * k2
        self._add(name, "conv", params, macs, 0, (spec.out_channels, ho, wo))
        return spec.out_channels, ho, wo

    def bn(self, name, c, h, w):
        self._add(name, "bn", 2 * c, self.n * c * h * w, 0, (c, h, w), state=2 * c)

    def prelu(self, name, c, h, w):
        self._add(name, "prelu", c, 0, self.n * c * h * w, (c, h, w))

    def relu(self, name, c, h, w):
        self._add(name, "relu", 0, 0, self.n * c * h * w, (c, h, w))

    def pool(self, name, c, h, w, window, stride, padding=0, ceil=False):
        span = h + 2 * padding - window
        ho = (-(-span // stride) if ceil else span // stride) + 1
        span = w + 2 * padding - window
        wo = (-(-span // stride) if ceil else span // stride) + 1
        self._add(name, "pool", 0, 0, self.n * c * ho * wo * window * window, (c, ho, wo))
        return c, ho, wo

    def upsample(self, name, c, h, w):
        # four weighted taps per output element
        self._add(name, "upsample", 0, 4 * self.n * c * h * w, 0, (c, h, w))

    def add(self, name, c, h, w):
        self._add(name, "add", 0, 0, self.n * c * h * w, (c, h, w))

    def unit(self, name, spec: ConvSpec, c, h, w, act="prelu"):
        """conv + activation + BN (the order does not change the cost)."""
        c, h, w = self.conv(f"{name}.conv", spec, c, h, w)
        if act == "prelu":
            self.prelu(f"{name}.act", c, h, w)
        self.bn(f"{name}.bn", c, h, w)
        if act == "relu":
            self.relu(f"{name}.relu", c, h, w)
        return c, h, w

    def ddcm(self, name, spec: DdcmSpec, c, h, w):
        spec = spec.with_input(c)
        for i, block in enumerate(spec.blocks()):
            bc, bh, bw = self.unit(f"{name}.block{i}.unit", block.conv_spec(), c, h, w)
            if (bh, bw) != (h, w):
                self.upsample(f"{name}.block{i}.upsample", bc, h, w)
            c += bc
        return self.unit(f"{name}.merge", spec.merge_spec(), c, h, w)

    # residual backbones, counted only -----------------------------------

    def bottleneck(self, name, c, h, w, width, out, stride, groups=1, se=False):
        x = (c, h, w)
        c1, h1, w1 = self.unit(f"{name}.conv1", ConvSpec(c, width, 1, has_bias=False), c, h, w, "relu")
        c2, h2, w2 = self.unit(f"{name}.conv2", ConvSpec(c1, width, 3, stride=stride, groups=groups,
                                                         has_bias=False), c1, h1, w1, "relu")
        c3, h3, w3 = self.conv(f"{name}.conv3.conv", ConvSpec(c2, out, 1, has_bias=False), c2, h2, w2)
        self.bn(f"{name}.conv3.bn", c3, h3, w3)
        if se:
            red = out // 16
            self._add(f"{name}.se.pool", "pool", 0, 0, self.n * c3 * h3 * w3, (c3, 1, 1))
            self.conv(f"{name}.se.fc1", ConvSpec(c3, red, 1), c3, 1, 1)
            self.relu(f"{name}.se.relu", red, 1, 1)
            self.conv(f"{name}.se.fc2", ConvSpec(red, c3, 1), red, 1, 1)
            self._add(f"{name}.se.gate", "scale", 0, 0, self.n * c3 * (1 + h3 * w3), (c3, h3, w3))
        if stride != 1 or c != out:
            self.conv(f"{name}.downsample.conv", ConvSpec(x[0], out, 1, stride=stride, has_bias=False), *x)
            self.bn(f"{name}.downsample.bn", out, h3, w3)
        self.add(f"{name}.add", out, h3, w3)
        self.relu(f"{name}.relu", out, h3, w3)
        return out, h3, w3

    def residual(self, mode, c, h, w):
        """ResNet50 / SE-ResNeXt50 (32x4d) stem and first three stages."""
        c, h, w = self.unit("backbone.stem", ConvSpec(c, 64, 7, stride=2, padding=3, has_bias=False),
                            c, h, w, "relu")
        c, h, w = self.pool("backbone.stem.pool", c, h, w, 3, 2, padding=1 if mode == "resnet50" else 0,
                            ceil=mode != "resnet50")
        se = mode == "se-resnext50"
        groups = 32 if se else 1
        for s, (blocks, base, out) in enumerate(((3, 64, 256), (4, 128, 512), (6, 256, 1024))):
            width = base * 2 if se else base
            for b in range(blocks):
                stride = 2 if s > 0 and b == 0 else 1
                c, h, w = self.bottleneck(f"backbone.layer{s + 1}.{b}", c, h, w, width, out, stride, groups, se)
        return c, h, w


def cost_report(spec: NetworkSpec, input_shape=(1, 3, 256, 256)) -> CostReport:
    n, c0, h0, w0 = input_shape
    if min(input_shape) < 1:
        raise ValueError(f"invalid input shape {input_shape}")
    if c0 != 3:
        raise ValueError("the network takes 3-channel images")
    eff = spec.effective()
    wk = _Walker(n)
    bb = spec.backbone
    if bb.structural:
        c, h, w = wk.residual(bb.mode, c0, h0, w0)
    else:
        c, h, w = c0, h0, w0
        for i, width in enumerate(bb.widths):
            c, h, w = wk.unit(f"backbone.stage{i}.unit", ConvSpec(c, width, 3), c, h, w)
            c, h, w = wk.pool(f"backbone.stage{i}.pool", c, h, w, 2, 2)
    for i, d in enumerate(eff.high_level):
        c, h, w = wk.ddcm(f"decoder{i}", d, c, h, w)
    if spec.decoder_upsample > 1:
        h, w = h * spec.decoder_upsample, w * spec.decoder_upsample
        wk.upsample("decoder_upsample", c, h, w)
    if eff.low_level is not None:
        lc, lh, lw = wk.ddcm("encoder", eff.low_level, c0, h0, w0)
        s = spec.fusion_stride
        lc, lh, lw = wk.pool("fusion_pool", lc, lh, lw, s, s)
        if (lh, lw) != (h, w):
            raise ValueError(f"encoder stream {lh}x{lw} does not meet decoder stream {h}x{w}")
        if spec.fusion == "concat":
            c += lc
        else:
            wk.add("fusion_sum", c, h, w)
    c, h, w = wk.unit("head", ConvSpec(c, spec.head_channels, 3), c, h, w)
    c, h, w = wk.conv("classifier", ConvSpec(c, spec.num_classes, 1), c, h, w)
    wk.upsample("output_upsample", c, h0, w0)
    return CostReport(tuple(input_shape), wk.layers)


def count_params(spec: NetworkSpec) -> CostReport:
    """Parameter-only view (counts do not depend on the probe input)."""
    stride = spec.backbone.stride
    return cost_report(spec, (1, 3, 2 * stride, 2 * stride))


def count_flops(spec: NetworkSpec, input_shape) -> CostReport:
    return cost_report(spec, input_shape)


def parse_shape(text: str) -> tuple[int, int, int, int]:
    """``3x256x256`` or ``1x3x256x256``."""
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"input shape must look like CxHxW or NxCxHxW, got {text!r}") from None
    if len(dims) == 3:
        dims = (1,) + dims
    if len(dims) != 4 or min(dims) < 1:
        raise ValueError(f"input shape must look like CxHxW or NxCxHxW, got {text!r}")
    return dims


def render_cost(report: CostReport, conventions=CONVENTIONS) -> str:
    lines = [f"input {'x'.join(map(str, report.input_shape))}",
             f"Parameters (Million): {report.params / 1e6:.2f}  ({report.params} trainable; "
             f"{report.state} running-statistic values not counted)"]
    for conv in conventions:
        lines.append(f"FLOPs (Giga, {conv}): {report.flops(conv) / 1e9:.2f} all ops, "
                     f"{report.flops(conv, conv_only=True) / 1e9:.2f} conv only")
    groups: dict[str, list[int]] = {}
    for l in report.layers:
        top = l.name.split(".")[0]
        g = groups.setdefault(top, [0, 0])
        g[0] += l.params
        g[1] += l.macs
    lines.append("")
    lines.append(f"{'block':<18}{'params':>12}{'GMAC':>10}")
    for top, (p, m) in groups.items():
        lines.append(f"{top:<18}{p:>12}{m / 1e9:>10.4f}")
    return "\n".join(lines) + "\n"


def cost_csv(report: CostReport) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["name", "kind", "params", "state", "macs", "ops", "flops_mac1", "flops_mac2", "out_shape"])
    for l in report.layers:
        wr.writerow([l.name, l.kind, l.params, l.state, l.macs, l.ops, l.flops("mac1"), l.flops("mac2"),
                     "x".join(map(str, l.out_shape))])
    wr.writerow(["total", "", report.params, report.state, sum(l.macs for l in report.layers),
                 sum(l.ops for l in report.layers), report.flops("mac1"), report.flops("mac2"), ""])
    return buf.getvalue()


# -- receptive fields ---------------------------------------------------------------

@dataclass(frozen=True)
class RfModule:
    name: str
    kernel: int
    rates: tuple[int, ...]
    strides: tuple[int, ...]
    per_layer: list[list[int]]
    merged: list[int]


def rf_report(spec: Union[NetworkSpec, DdcmSpec]) -> list[RfModule]:
    if isinstance(spec, DdcmSpec):
        modules = [("ddcm", spec)]
    else:
        eff = spec.effective()
        modules = ([("encoder", eff.low_level)] if eff.low_level is not None else [])
        modules += [(f"decoder{i}", d) for i, d in enumerate(eff.high_level)]
    out = []
    for name, d in modules:
        per_layer, merged = fused_receptive_fields(d.kernel, d.rates)
        out.append(RfModule(name, d.kernel, d.rates, tuple(d.block_stride(r) for r in d.rates),
                            per_layer, merged))
    return out


def render_rf(modules: list[RfModule]) -> str:
    lines = []
    for m in modules:
        lines.append(f"{m.name}: k={m.kernel} rates {list(m.rates)}")
        for i, (r, s, fields) in enumerate(zip(m.rates, m.strides, m.per_layer)):
            note = f"  (samples every {s} px; upsampled back)" if s > 1 else ""
            lines.append(f"  block{i} r={r} k_eff={effective_kernel(m.kernel, r)} fields {fields}{note}")
        lines.append(f"  merged {m.merged}")
        if any(s > 1 for s in m.strides):
            lines.append("  fields assume unit stride; strided blocks sample the same extent more sparsely")
    return "\n".join(lines) + "\n"


def rf_csv(modules: list[RfModule]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["module", "layer", "rate", "stride", "fields"])
    for m in modules:
        for i, (r, s, fields) in enumerate(zip(m.rates, m.strides, m.per_layer)):
            wr.writerow([m.name, i, r, s, " ".join(map(str, fields))])
        wr.writerow([m.name, "merged", "", "", " ".join(map(str, m.merged))])
    return buf.getvalue()
