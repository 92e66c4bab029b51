"""Whole-tile prediction: sliding windows, flip TTA and the downscaled path."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T

# Each transform is its own inverse.
TTA_TRANSFORMS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda a: a,
    "hflip": lambda a: a[..., ::-1],
    "vflip": lambda a: a[..., ::-1, :],
    "hvflip": lambda a: a[..., ::-1, ::-1],
}
TTA_ALL = tuple(TTA_TRANSFORMS)


def axis_origins(size: int, window: int, stride: int) -> list[int]:
    if window > size:
        raise ValueError(f"window {window} larger than image side {size}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    origins = list(range(0, size - window + 1, stride))
    if origins[-1] + window < size:
        origins.append(size - window)
    return origins


@dataclass(frozen=True)
class StitchPlan:
    height: int
    width: int
    win_h: int
    win_w: int
    stride: int
    ys: tuple[int, ...]
    xs: tuple[int, ...]

    @property
    def windows(self) -> list[tuple[int, int]]:
        return [(y, x) for y in self.ys for x in self.xs]

    def coverage(self) -> np.ndarray:
        cov = np.zeros((self.height, self.width), dtype=np.int64)
        for y, x in self.windows:
            cov[y:y + self.win_h, x:x + self.win_w] += 1
        return cov


def plan_windows(h: int, w: int, window=448, stride: int = 100) -> StitchPlan:
    """``window`` is a side length or an ``(h, w)`` pair."""
    wh, ww = (window, window) if np.isscalar(window) else window
    return StitchPlan(h, w, int(wh), int(ww), stride,
                      tuple(axis_origins(h, wh, stride)), tuple(axis_origins(w, ww, stride)))


def full_plan(h: int, w: int) -> StitchPlan:
    return plan_windows(h, w, (h, w), max(h, w))


def _window_scores(net, patch: np.ndarray, tta: Sequence[str], space: str) -> np.ndarray:
    """Averaged per-class probabilities (float64, (C,h,w)) for one (3,h,w) patch."""
    acc = None
    for name in tta:
        f = TTA_TRANSFORMS[name]
        logits = f(net.forward(np.ascontiguousarray(f(patch[None])), train=False))[0]
        part = T.softmax(logits[None])[0] if space == "prob" else logits.astype(np.float64)
        acc = part if acc is None else acc + part
    acc = acc / len(tta)
    return T.softmax(acc[None])[0] if space == "logit" else acc


def _tta_names(tta) -> tuple[str, ...]:
    if tta is True:
        return TTA_ALL
    if tta is False or tta is None:
        return ("identity",)
    names = tuple(tta)
    bad = [n for n in names if n not in TTA_TRANSFORMS]
    if bad or not names:
        raise ValueError(f"unknown TTA transform(s) {bad}; expected a subset of {TTA_ALL}")
    return names


def predict_stitched(net, image: np.ndarray, plan: StitchPlan, tta=False, space: str = "prob"):
    """Class map (int64, (h,w)) and probability map (float32, (C,h,w)).

    ``tta`` is a bool or an explicit collection of transform names.
    Windows are accumulated in sorted origin order, so the result does not
    depend on the order in which ``plan`` lists them.
    """
    if space not in ("prob", "logit"):
        raise ValueError(f"tta space must be 'prob' or 'logit', got {space!r}")
    T.check_tensor(image[None], "image")
    _, h, w = image.shape
    if (h, w) != (plan.height, plan.width):
        raise ValueError(f"plan is for {plan.height}x{plan.width}, image is {h}x{w}")
    names = _tta_names(tta)
    wh, ww = plan.win_h, plan.win_w
    acc = np.zeros((net.num_classes, h, w), dtype=np.float64)
    for y, x in sorted(set(plan.windows)):
        acc[:, y:y + wh, x:x + ww] += _window_scores(net, image[:, y:y + wh, x:x + ww], names, space)
    probs = acc / plan.coverage()[None]
    return probs.argmax(axis=0), probs.astype(np.float32)


def predict_downscaled(net, image: np.ndarray, factor: int = 3, tta=True, space: str = "prob"):
    """Shrink by ``factor``, predict the whole image in one window, upsample probabilities back.

    The reduced size is rounded to a multiple of the network stride so the
    whole reduced image fits one window.
    """
    if factor < 1:
        raise ValueError("downscale factor must be >= 1")
    _, h, w = image.shape
    stride = net.spec.backbone.stride
    small_h = int(round(h / factor / stride)) * stride
    small_w = int(round(w / factor / stride)) * stride
    if small_h < stride or small_w < stride:
        raise ValueError(f"{h}x{w} downscaled by {factor} is below the network stride {stride}")
    resized = (small_h, small_w) != (h, w)
    small = T.resize_bilinear(image[None], small_h, small_w)[0] if resized else image
    _, probs = predict_stitched(net, small, full_plan(small_h, small_w), tta, space)
    if resized:
        probs = T.resize_bilinear(probs[None].astype(np.float64), h, w)[0]
    return probs.argmax(axis=0), probs.astype(np.float32)
