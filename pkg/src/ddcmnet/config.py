"""Flat ``section.key = value`` configuration, presets and overlays.

Every setting has a typed default.  ``render`` writes every key, so a
rendered config parses back to an equal config regardless of the preset it
was derived from.  Decoder sections are numbered ``decoder1`` ..
``decoderN`` where N is ``network.decoders``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .augment import AugmentConfig
from .ddcm import DYNAMIC, DdcmSpec
from .network import BACKBONE_MODES, FUSIONS, POOLS, BackboneSpec, NetworkSpec
from .layers import BLOCK_ORDERS
from .optim import LrSchedule, OptimizerConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# -- value types ----------------------------------------------------------

def _int(text: str) -> int:
    if not re.fullmatch(r"[+-]?\d+", text):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(text)


def _float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"expected a finite number, got {text!r}")
    return v


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(_int(p) for p in parts)


def _float_list(text: str) -> tuple[float, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(_float(p) for p in parts)


def _int_list_or_none(text: str) -> tuple[int, ...]:
    return () if text.lower() == "none" else _int_list(text)


def _opt_int(text: str) -> Optional[int]:
    return None if text.lower() == "none" else _int(text)


def _int_or(word: str) -> Callable[[str], Any]:
    def parse(text: str):
        return word if text.lower() == word else _int(text)
    return parse


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def render_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(render_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- range checks -----------------------------------------------------------

def _pos(v):
    return v is None or isinstance(v, str) or (min(v) if isinstance(v, tuple) else v) >= 1


def _nonneg(v):
    return (min(v) if isinstance(v, tuple) else v) >= 0


def _prob(v):
    return 0.0 <= v <= 1.0


def _unit_open(v):
    return 0.0 <= v < 1.0


def _any(v):
    return True


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    check: Callable[[Any], bool] = _any
    rule: str = ""
    published: bool = False
    doc: str = ""


LR_ISPRS = 8.5e-5 / math.sqrt(2)
LR_DEEPGLOBE = 8.5e-4 / math.sqrt(2)

SCHEMA: dict[str, Key] = {
    "network.backbone": Key(_choice(*BACKBONE_MODES), doc="toy runs; resnet50/se-resnext50 are counting-only"),
    "network.widths": Key(_int_list, _pos, ">= 1", doc="toy backbone stage widths (one 2x pool per stage)"),
    "network.classes": Key(_int, lambda v: v >= 2, ">= 2"),
    "network.decoders": Key(_int, _pos, ">= 1", doc="number of decoderN sections"),
    "network.head_channels": Key(_int, _pos, ">= 1", doc="width of the 3x3 fusion head"),
    "network.fusion": Key(_choice(*FUSIONS)),
    "network.pool": Key(_choice(*POOLS), doc="pooling that brings the encoder stream to decoder resolution"),
    "network.decoder_upsample": Key(_int, _pos, ">= 1", doc="bilinear factor applied after the last decoder"),
    "network.block_order": Key(_choice(*BLOCK_ORDERS), published=True),
    "network.no_ll_encoder": Key(_bool, published=True, doc="drop the encoder; last decoder widens by its output"),
    "network.no_dilation": Key(_bool, published=True, doc="force every dilation rate to 1"),
    "train.epochs": Key(_int, _pos, ">= 1"),
    "train.patches": Key(_int, _pos, ">= 1", published=True, doc="patches drawn per epoch"),
    "train.patch": Key(_int, _pos, ">= 1", published=True, doc="patch side in pixels"),
    "train.batch": Key(_int, _pos, ">= 1", published=True),
    "train.seed": Key(_int, _nonneg, ">= 0"),
    "train.lr": Key(_float, _nonneg, ">= 0", published=True),
    "train.weight_decay": Key(_float, _nonneg, ">= 0", published=True),
    "train.bias_lr_mult": Key(_float, _nonneg, ">= 0", published=True),
    "train.beta1": Key(_float, _unit_open, "in [0, 1)"),
    "train.beta2": Key(_float, _unit_open, "in [0, 1)"),
    "train.eps": Key(_float, lambda v: v > 0, "> 0"),
    "train.amsgrad": Key(_bool, published=True),
    "train.decay": Key(_choice("coupled", "decoupled")),
    "train.schedule": Key(_choice("poly", "step", "multistep"), published=True),
    "train.poly_power": Key(_float, _nonneg, ">= 0", published=True),
    "train.poly_max_iter": Key(_float, lambda v: v > 0, "> 0", published=True),
    "train.step_factor": Key(_float, lambda v: 0 < v <= 1, "in (0, 1]", published=True),
    "train.step_every": Key(_int, _pos, ">= 1", published=True, doc="epochs between step decays"),
    "train.multistep_factor": Key(_float, lambda v: 0 < v <= 1, "in (0, 1]", published=True),
    "train.multistep_epochs": Key(_int_list, _nonneg, ">= 0", published=True),
    "train.mfb": Key(_bool, published=True, doc="median-frequency-balanced class weights from the training split"),
    "train.ignore_id": Key(_opt_int, lambda v: v is None or v >= 0, "none or >= 0"),
    "train.val_every": Key(_int, _pos, ">= 1", doc="validate every N epochs (and after the last)"),
    "augment.flip_p": Key(_float, _prob, "in [0, 1]", published=True, doc="vertical flip probability"),
    "augment.mirror_p": Key(_float, _prob, "in [0, 1]", published=True, doc="horizontal mirror probability"),
    "augment.affine_p": Key(_float, _prob, "in [0, 1]"),
    "augment.shift_limit": Key(_float, _nonneg, ">= 0", published=True, doc="fraction of the patch side"),
    "augment.scale_limit": Key(_float, _unit_open, "in [0, 1)", published=True),
    "augment.rotate_limit": Key(_float, _nonneg, ">= 0", published=True, doc="degrees"),
    "infer.window": Key(_int, _pos, ">= 1", published=True),
    "infer.stride": Key(_int, _pos, ">= 1", published=True),
    "infer.tta": Key(_bool, published=True, doc="average over identity, h-flip, v-flip and both"),
    "infer.tta_space": Key(_choice("prob", "logit")),
    "infer.downscale": Key(_int, _pos, ">= 1", published=True, doc="predict at 1/N size and upsample back"),
    "eval.exclude": Key(_int_list_or_none, lambda v: not v or _nonneg(v), ">= 0", published=True,
                        doc="classes left out of mF1/mIoU"),
    "data.split": Key(_float_list, _nonneg, ">= 0", doc="train,val,test fractions"),
}

DDCM_SCHEMA: dict[str, Key] = {
    "rates": Key(_int_list, _pos, ">= 1", published=True),
    "out": Key(_int, _pos, ">= 1", published=True, doc="merging layer output channels"),
    "width": Key(_int_or("auto"), _pos, "auto or >= 1", doc="per-block width m; auto = out"),
    "kernel": Key(_int, lambda v: v >= 1 and v % 2 == 1, "odd and >= 1", published=True),
    "groups": Key(_int, _pos, ">= 1", published=True),
    "stride": Key(_int_or(DYNAMIC), _pos, "dynamic or >= 1", published=True),
}

SECTION_ORDER = ("network", "encoder", "decoder", "train", "augment", "infer", "eval", "data")


def _ddcm(rates, out, stride=1, groups=1, width="auto", kernel=3) -> dict[str, Any]:
    return {"rates": tuple(rates), "out": out, "width": width, "kernel": kernel,
            "groups": groups, "stride": stride}


def _isprs() -> dict[str, Any]:
    v = {
        "network.backbone": "resnet50",
        "network.widths": (16, 32, 64),
        "network.classes": 6,
        "network.decoders": 2,
        "network.head_channels": 64,
        "network.fusion": "concat",
        "network.pool": "max",
        "network.decoder_upsample": 1,
        "network.block_order": "conv-prelu-bn",
        "network.no_ll_encoder": False,
        "network.no_dilation": False,
        "train.epochs": 100,
        "train.patches": 5000,
        "train.patch": 256,
        "train.batch": 5,
        "train.seed": 0,
        "train.lr": LR_ISPRS,
        "train.weight_decay": 2e-5,
        "train.bias_lr_mult": 2.0,
        "train.beta1": 0.9,
        "train.beta2": 0.999,
        "train.eps": 1e-8,
        "train.amsgrad": True,
        "train.decay": "coupled",
        "train.schedule": "step",
        "train.poly_power": 0.9,
        "train.poly_max_iter": 1e8,
        "train.step_factor": 0.85,
        "train.step_every": 15,
        "train.multistep_factor": 0.56,
        "train.multistep_epochs": (4, 8, 16, 24, 32, 96, 128),
        "train.mfb": True,
        "train.ignore_id": None,
        "train.val_every": 1,
        "augment.flip_p": 0.5,
        "augment.mirror_p": 0.5,
        "augment.affine_p": 0.5,
        "augment.shift_limit": 0.0625,
        "augment.scale_limit": 0.1,
        "augment.rotate_limit": 10.0,
        "infer.window": 448,
        "infer.stride": 100,
        "infer.tta": True,
        "infer.tta_space": "prob",
        "infer.downscale": 1,
        "eval.exclude": (5,),
        "data.split": (0.8, 0.2, 0.0),
    }
    _put_ddcm(v, "encoder", _ddcm((1, 2, 3, 5, 7, 9), 3))
    _put_ddcm(v, "decoder1", _ddcm((1, 2, 3, 4), 36))
    _put_ddcm(v, "decoder2", _ddcm((1,), 18))
    return v


def _deepglobe() -> dict[str, Any]:
    v = _isprs()
    v.update({
        "network.backbone": "se-resnext50",
        "network.classes": 7,
        "train.lr": LR_DEEPGLOBE,
        "train.schedule": "multistep",
        "train.patch": 765,
        "train.patches": 4000,
        "train.batch": 4,
        "infer.downscale": 3,
        "eval.exclude": (6,),
    })
    _put_ddcm(v, "encoder", _ddcm((1, 2, 4, 8, 16, 32), 3, stride=2))
    _put_ddcm(v, "decoder1", _ddcm((1, 2, 4), 64, stride=2, groups=2))
    _put_ddcm(v, "decoder2", _ddcm((1,), 32, stride=2, groups=2))
    return v


def _toy() -> dict[str, Any]:
    """Desk-scale stand-in: ISPRS-style DDCM streams over the toy backbone."""
    v = _isprs()
    v.update({
        "network.backbone": "toy",
        "network.widths": (16, 32, 64),
        "network.decoder_upsample": 2,
        "train.epochs": 8,
        "train.patches": 200,
        "train.patch": 128,
        "train.lr": 2e-3,
        "train.step_every": 4,
        "augment.affine_p": 0.0,
        "infer.window": 256,
        "infer.stride": 128,
        "infer.tta": False,
    })
    return v


def _put_ddcm(values: dict, section: str, ddcm: dict) -> None:
    for k, val in ddcm.items():
        values[f"{section}.{k}"] = val


PRESETS: dict[str, Callable[[], dict[str, Any]]] = {
    "isprs": _isprs,
    "ddcm-r50": _isprs,
    "deepglobe": _deepglobe,
    "ddcm-ser50": _deepglobe,
    "toy": _toy,
}


def _ddcm_sections(values):
    return ["encoder"] + [f"decoder{i}" for i in range(1, values["network.decoders"] + 1)]


def _overlay_stride(stride):
    def apply(values):
        for sec in _ddcm_sections(values):
            values[f"{sec}.stride"] = stride
    return apply


def _overlay_flag(key):
    def apply(values):
        values[key] = True
    return apply


OVERLAYS: dict[str, Callable[[dict], None]] = {
    "s2": _overlay_stride(2),
    "s3": _overlay_stride(3),
    "dynamic": _overlay_stride(DYNAMIC),
    "no-ll-encoder": _overlay_flag("network.no_ll_encoder"),
    "no-dilation": _overlay_flag("network.no_dilation"),
}


def preset_values(name: str) -> dict[str, Any]:
    """Values for ``base[+overlay...]``, e.g. ``isprs+no-dilation``."""
    base, *overlays = name.split("+")
    if base not in PRESETS:
        raise ConfigError(f"unknown preset {base!r}; known: {', '.join(sorted(PRESETS))}")
    values = PRESETS[base]()
    for o in overlays:
        if o not in OVERLAYS:
            raise ConfigError(f"unknown overlay {o!r}; known: {', '.join(sorted(OVERLAYS))}")
        OVERLAYS[o](values)
    return values


def preset_names() -> list[str]:
    return sorted(PRESETS)


# -- the config object ------------------------------------------------------------

def _schema_for(key: str) -> Optional[Key]:
    if key in SCHEMA:
        return SCHEMA[key]
    section, _, field = key.partition(".")
    if section == "encoder" or re.fullmatch(r"decoder[1-9]\d*", section):
        return DDCM_SCHEMA.get(field)
    return None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    patches: int
    patch: int
    batch: int
    seed: int
    mfb: bool
    ignore_id: Optional[int]
    val_every: int


@dataclass(frozen=True)
class InferConfig:
    window: int
    stride: int
    tta: bool
    tta_space: str
    downscale: int


class Config:
    def __init__(self, values: dict[str, Any]):
        self.values = dict(values)
        self._validate()

    def __eq__(self, other) -> bool:
        return isinstance(other, Config) and self.values == other.values

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **updates) -> "Config":
        """Copy with ``section__key=value`` overrides (double underscore for the dot)."""
        values = dict(self.values)
        for k, v in updates.items():
            values[k.replace("__", ".", 1)] = v
        return Config(values)

    def _validate(self) -> None:
        n = self.values.get("network.decoders")
        for i in range(1, (n or 0) + 1):
            sec = f"decoder{i}"
            for field in DDCM_SCHEMA:
                self.values.setdefault(f"{sec}.{field}", _ddcm((1,), 18)[field])
        expected = set(SCHEMA) | {f"{sec}.{f}" for sec in _ddcm_sections(self.values) for f in DDCM_SCHEMA}
        extra = set(self.values) - expected
        if extra:
            raise ConfigError(f"unknown key(s): {', '.join(sorted(extra))}")
        missing = expected - set(self.values)
        if missing:
            raise ConfigError(f"missing key(s): {', '.join(sorted(missing))}")
        for key, val in self.values.items():
            if not _schema_for(key).check(val):
                raise ConfigError(f"{key} = {render_value(val)} out of range ({_schema_for(key).rule})")
        split = self.values["data.split"]
        if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9:
            raise ConfigError("data.split needs three fractions summing to 1")
        try:
            self.network
        except ValueError as exc:
            raise ConfigError(f"inconsistent network settings: {exc}") from exc

    def _ddcm_spec(self, section: str) -> DdcmSpec:
        g = lambda f: self.values[f"{section}.{f}"]
        width = g("width")
        return DdcmSpec(rates=g("rates"), out_channels=g("out"), width=None if width == "auto" else width,
                        kernel=g("kernel"), groups=g("groups"), stride=g("stride"))

    @property
    def network(self) -> NetworkSpec:
        v = self.values
        return NetworkSpec(
            backbone=BackboneSpec(v["network.backbone"], v["network.widths"]),
            low_level=self._ddcm_spec("encoder"),
            high_level=tuple(self._ddcm_spec(f"decoder{i}") for i in range(1, v["network.decoders"] + 1)),
            num_classes=v["network.classes"],
            head_channels=v["network.head_channels"],
            fusion=v["network.fusion"],
            pool=v["network.pool"],
            decoder_upsample=v["network.decoder_upsample"],
            no_ll_encoder=v["network.no_ll_encoder"],
            no_dilation=v["network.no_dilation"],
            block_order=v["network.block_order"],
        )

    @property
    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(v["train.epochs"], v["train.patches"], v["train.patch"], v["train.batch"],
                           v["train.seed"], v["train.mfb"], v["train.ignore_id"], v["train.val_every"])

    @property
    def optimizer(self) -> OptimizerConfig:
        v = self.values
        return OptimizerConfig(lr=v["train.lr"], weight_decay=v["train.weight_decay"],
                               bias_lr_mult=v["train.bias_lr_mult"], beta1=v["train.beta1"],
                               beta2=v["train.beta2"], eps=v["train.eps"], amsgrad=v["train.amsgrad"],
                               decay=v["train.decay"])

    @property
    def schedule(self) -> LrSchedule:
        v = self.values
        return LrSchedule(kind=v["train.schedule"], poly_power=v["train.poly_power"],
                          poly_max_iter=v["train.poly_max_iter"], step_factor=v["train.step_factor"],
                          step_every=v["train.step_every"], multistep_factor=v["train.multistep_factor"],
                          multistep_epochs=v["train.multistep_epochs"])

    @property
    def augment(self) -> AugmentConfig:
        v = self.values
        return AugmentConfig(flip_p=v["augment.flip_p"], mirror_p=v["augment.mirror_p"],
                             affine_p=v["augment.affine_p"], shift_limit=v["augment.shift_limit"],
                             scale_limit=v["augment.scale_limit"], rotate_limit=v["augment.rotate_limit"])

    @property
    def infer(self) -> InferConfig:
        v = self.values
        return InferConfig(v["infer.window"], v["infer.stride"], v["infer.tta"],
                           v["infer.tta_space"], v["infer.downscale"])

    @property
    def exclude(self) -> tuple[int, ...]:
        return self.values["eval.exclude"]

    @property
    def split(self) -> tuple[float, ...]:
        return self.values["data.split"]

    def ordered_keys(self) -> list[str]:
        def rank(key):
            sec, _, field = key.partition(".")
            if sec.startswith("decoder"):
                return (SECTION_ORDER.index("decoder"), int(sec[7:]), list(DDCM_SCHEMA).index(field))
            if sec == "encoder":
                return (SECTION_ORDER.index("encoder"), 0, list(DDCM_SCHEMA).index(field))
            return (SECTION_ORDER.index(sec), 0, list(SCHEMA).index(key))
        return sorted(self.values, key=rank)


def default_config(preset: str = "isprs") -> Config:
    return Config(preset_values(preset))


def parse_config(text: str, preset: str = "isprs") -> Config:
    """Parse config text on top of ``preset``; errors name the offending line."""
    values = preset_values(preset)
    seen: dict[str, int] = {}
    pending = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not eq or not key:
            raise ConfigError(f"expected 'section.key = value', got {raw.strip()!r}", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key} (first set on line {seen[key]})", lineno)
        seen[key] = lineno
        schema = _schema_for(key)
        if schema is None:
            raise ConfigError(f"unknown key {key!r}", lineno)
        try:
            parsed = schema.parse(val)
        except ValueError as exc:
            raise ConfigError(f"{key}: type error: {exc}", lineno) from None
        if not schema.check(parsed):
            raise ConfigError(f"{key} = {val} out of range ({schema.rule})", lineno)
        pending.append((key, parsed, lineno))
    for key, parsed, _ in pending:
        values[key] = parsed
    n = values["network.decoders"]
    for key, _, lineno in pending:
        m = re.fullmatch(r"decoder(\d+)\..*", key)
        if m and int(m.group(1)) > n:
            raise ConfigError(f"{key}: only {n} decoder section(s) configured (network.decoders)", lineno)
    for key in [k for k in values if re.fullmatch(r"decoder(\d+)\..*", k)]:
        if int(re.match(r"decoder(\d+)", key).group(1)) > n:
            del values[key]
    return Config(values)


def render_config(config: Config, annotate: bool = False) -> str:
    """Text form of every key.

    With ``annotate``, keys still at a published setting of the reference
    configurations are tagged ``[published]`` and documented keys get a note.
    """
    lines = []
    section = None
    published = (_isprs(), _deepglobe())
    for key in config.ordered_keys():
        sec = key.partition(".")[0]
        if annotate and sec != section:
            if section is not None:
                lines.append("")
            lines.append(f"# {sec}")
        section = sec
        line = f"{key} = {render_value(config[key])}"
        if annotate:
            schema = _schema_for(key)
            notes = []
            if schema.published and any(ref.get(key) == config[key] for ref in published):
                notes.append("[published]")
            if schema.doc:
                notes.append(schema.doc)
            if notes:
                line = f"{line:<44} # {' '.join(notes)}"
        lines.append(line)
    return "\n".join(lines) + "\n"
