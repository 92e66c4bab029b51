"""End-to-end segmentation network: backbone, DDCM streams, fusion head."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor as T
from . import tensorio
from .ddcm import Ddcm, DdcmSpec
from .layers import BLOCK_ORDERS, Conv2d, ConvUnit, Module, Pool2d, Sequential
from .tensor import ConvSpec

BACKBONE_MODES = ("toy", "resnet50", "se-resnext50")
STRUCTURAL_MODES = ("resnet50", "se-resnext50")
FUSIONS = ("concat", "sum")
POOLS = ("max", "avg")


class StructuralBackboneError(RuntimeError):
    """Forward requested through a backbone that exists only for cost accounting."""


class CheckpointError(IOError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    mode: str = "toy"
    widths: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        if self.mode not in BACKBONE_MODES:
            raise ValueError(f"unknown backbone mode {self.mode!r}; expected one of {BACKBONE_MODES}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.mode == "toy" and (not self.widths or min(self.widths) < 1):
            raise ValueError("toy backbone needs positive stage widths")

    @property
    def structural(self) -> bool:
        return self.mode in STRUCTURAL_MODES

    @property
    def stride(self) -> int:
        return 16 if self.structural else 2 ** len(self.widths)

    @property
    def out_channels(self) -> int:
        return 1024 if self.structural else self.widths[-1]


@dataclass(frozen=True)
class NetworkSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    low_level: Optional[DdcmSpec] = None
    high_level: tuple[DdcmSpec, ...] = ()
    num_classes: int = 6
    head_channels: int = 64
    fusion: str = "concat"
    pool: str = "max"
    decoder_upsample: int = 1
    no_ll_encoder: bool = False
    no_dilation: bool = False
    block_order: str = "conv-prelu-bn"

    def __post_init__(self):
        object.__setattr__(self, "high_level", tuple(self.high_level))
        if not self.high_level:
            raise ValueError("network needs at least one high-level DDCM module")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.pool not in POOLS:
            raise ValueError(f"pool must be one of {POOLS}")
        if self.block_order not in BLOCK_ORDERS:
            raise ValueError(f"block_order must be one of {BLOCK_ORDERS}")
        if self.decoder_upsample < 1 or self.backbone.stride % self.decoder_upsample:
            raise ValueError(
                f"decoder_upsample={self.decoder_upsample} must divide backbone stride {self.backbone.stride}")
        if self.head_channels < 1:
            raise ValueError("head_channels must be >= 1")

    def effective(self) -> "NetworkSpec":
        """Apply ablation flags and resolve every module's input width."""
        low, high = self.low_level, list(self.high_level)
        if self.no_dilation:
            high = [replace(d, rates=(1,) * len(d.rates)) for d in high]
            if low is not None:
                low = replace(low, rates=(1,) * len(low.rates))
        if self.no_ll_encoder and low is not None:
            high[-1] = replace(high[-1], out_channels=high[-1].out_channels + low.out_channels,
                               width=None if high[-1].width == high[-1].out_channels else high[-1].width)
            low = None
        if low is not None:
            low = low.with_input(3)
        c = self.backbone.out_channels
        for i, d in enumerate(high):
            high[i] = d.with_input(c)
            c = d.out_channels
        if low is not None and self.fusion == "sum" and low.out_channels != c:
            raise ValueError(f"sum fusion needs equal stream widths, got {low.out_channels} and {c}")
        return replace(self, low_level=low, high_level=tuple(high), no_dilation=False, no_ll_encoder=False)

    @property
    def fusion_stride(self) -> int:
        return self.backbone.stride // self.decoder_upsample

    def fused_channels(self) -> int:
        eff = self.effective()
        c = eff.high_level[-1].out_channels
        if eff.low_level is not None and self.fusion == "concat":
            c += eff.low_level.out_channels
        return c


class ToyBackbone(Sequential):
    def __init__(self, spec: BackboneSpec, rng, order):
        stages, c = [], 3
        for i, w in enumerate(spec.widths):
            stages.append((f"stage{i}", Sequential(
                ("unit", ConvUnit(ConvSpec(c, w, 3), rng, order)),
                ("pool", Pool2d(2, 2, "max")),
            )))
            c = w
        super().__init__(*stages)


class StructuralBackbone(Module):
    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec

    def forward(self, x, train=False):
        raise StructuralBackboneError(
            f"backbone {self.spec.mode!r} is structural (counting only) and has no weights; "
            "use network.backbone = toy to run the network")

    backward = forward


class Network(Module):
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        super().__init__()
        self.requested = spec
        self.spec = spec.effective()
        rng = np.random.default_rng(seed)
        order = spec.block_order
        bb = spec.backbone
        self.backbone = self.add_child(
            "backbone", StructuralBackbone(bb) if bb.structural else ToyBackbone(bb, rng, order))
        self.encoder = None
        if self.spec.low_level is not None:
            self.encoder = self.add_child("encoder", Ddcm(self.spec.low_level, rng, order))
        self.decoders = [self.add_child(f"decoder{i}", Ddcm(d, rng, order))
                         for i, d in enumerate(self.spec.high_level)]
        fused = spec.fused_channels()
        self.head = self.add_child("head", ConvUnit(ConvSpec(fused, spec.head_channels, 3), rng, order))
        self.classifier = self.add_child(
            "classifier", Conv2d(ConvSpec(spec.head_channels, spec.num_classes, 1), rng))
        self.fusion_pool = Pool2d(spec.fusion_stride, spec.fusion_stride, spec.pool)
        self.calls: Counter = Counter()
        self._cache = None

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def parameter_count(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())

    def forward(self, x, train=False):
        T.check_tensor(x, "images")
        n, c, h, w = x.shape
        stride = self.spec.backbone.stride
        if c != 3:
            raise T.ShapeError(f"images must have 3 channels, got {c}")
        if h % stride or w % stride:
            raise T.ShapeError(f"image size {h}x{w} not divisible by backbone stride {stride}")
        self.calls["forward"] += 1
        f = self.backbone.forward(x, train)
        for dec in self.decoders:
            f = dec.forward(f, train)
        dec_hw = f.shape[2:]
        up = self.spec.decoder_upsample
        if up > 1:
            f = T.bilinear_upsample(f, dec_hw[0] * up, dec_hw[1] * up)
        low_c = 0
        if self.encoder is not None:
            self.calls["encoder"] += 1
            low = self.fusion_pool.forward(self.encoder.forward(x, train))
            low_c = low.shape[1]
            f = T.concat_channels(low, f) if self.spec.fusion == "concat" else low + f
        z = self.classifier.forward(self.head.forward(f, train), train)
        self._cache = (x.shape, dec_hw, z.shape[2:], low_c)
        return T.bilinear_upsample(z, h, w)

    def backward(self, grad_logits):
        in_shape, dec_hw, z_hw, low_c = self._cache
        g = T.bilinear_upsample_backward(grad_logits, *z_hw)
        g = self.head.backward(self.classifier.backward(g))
        g_img = None
        if self.encoder is not None:
            if self.spec.fusion == "concat":
                g_low, g = T.split_channels(g, low_c)
            else:
                g_low = g
            g_img = self.encoder.backward(self.fusion_pool.backward(g_low))
        if self.spec.decoder_upsample > 1:
            g = T.bilinear_upsample_backward(g, *dec_hw)
        for dec in reversed(self.decoders):
            g = dec.backward(g)
        g_bb = self.backbone.backward(g)
        return g_bb if g_img is None else g_bb + g_img

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing, extra = expected - set(state), set(state) - expected
        if missing or extra:
            raise CheckpointError(
                f"parameter inventory mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise CheckpointError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float32)
            p.grad = np.zeros_like(p.data)
        for name in buffers:
            self.set_buffer(name, np.array(state[name], dtype=np.float32))


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    return Network(spec, seed)


SPEC_KEY = "__spec__"
STATE_KEY = "__state__"


def save_checkpoint(path, net: Network, config_text: str, extra: Optional[dict] = None,
                    state_text: str = "") -> None:
    entries = {SPEC_KEY: tensorio.encode_text(config_text)}
    if state_text:
        entries[STATE_KEY] = tensorio.encode_text(state_text)
    entries.update(net.state_dict())
    for name, arr in (extra or {}).items():
        entries[name] = arr
    tensorio.save(path, entries)


def load_checkpoint(path):
    """Returns ``(network, config, extra_entries, state_text)``."""
    from .config import parse_config

    try:
        entries = tensorio.load(path)
    except tensorio.TensorFileError as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if SPEC_KEY not in entries:
        raise CheckpointError(f"checkpoint {path} has no {SPEC_KEY} entry")
    config = parse_config(tensorio.decode_text(entries.pop(SPEC_KEY)))
    state_text = tensorio.decode_text(entries.pop(STATE_KEY)) if STATE_KEY in entries else ""
    extra = {k: entries.pop(k) for k in [k for k in entries if k.startswith("__")]}
    net = build_network(config.network, seed=config.train.seed)
    net.load_state_dict(entries)
    return net, config, extra, state_text


def checkpoint_size_bytes(net: Network, config_text: str = "") -> int:
    """Exact size :func:`save_checkpoint` would write (without optimizer state)."""
    entries = {SPEC_KEY: tensorio.encode_text(config_text)}
    entries.update(net.state_dict())
    return len(tensorio.dumps(entries))
