"""Adam with AMSGrad, parameter-group rules and learning-rate schedules."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .layers import BIAS, WEIGHT, Param


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 8.5e-5 / np.sqrt(2)
    weight_decay: float = 2e-5
    bias_lr_mult: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    amsgrad: bool = True
    decay: str = "coupled"

    def __post_init__(self):
        if self.decay not in ("coupled", "decoupled"):
            raise ValueError(f"decay must be 'coupled' or 'decoupled', got {self.decay!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("lr and weight_decay must be >= 0, eps > 0")


class AdamAMSGrad:
    """Adam with bias correction and a running max of the corrected second moment.

    Moments are kept in float32 (updated in float64) so that a checkpointed
    state reproduces the uninterrupted run exactly.

    Weight decay touches only ``weight``-kind parameters; ``bias``-kind
    parameters step with ``bias_lr_mult`` times the scheduled rate.
    """

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def _slot(self, name: str, p: Param):
        slot = self.state.get(name)
        if slot is None:
            z = np.zeros(p.data.shape, dtype=np.float32)
            slot = self.state[name] = {"m": z.copy(), "v": z.copy(), "vmax": z.copy()}
        elif slot["m"].shape != p.data.shape:
            raise ValueError(f"optimizer state for {name} has shape {slot['m'].shape}, param {p.data.shape}")
        return slot

    def step(self, params: Iterable[tuple[str, Param]], lr: float) -> None:
        cfg = self.config
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in params:
            slot = self._slot(name, p)
            w = p.data.astype(np.float64)
            g = p.grad.astype(np.float64)
            decays = p.kind == WEIGHT and cfg.weight_decay > 0
            if decays and cfg.decay == "coupled":
                g = g + cfg.weight_decay * w
            step_lr = lr * cfg.bias_lr_mult if p.kind == BIAS else lr
            m = cfg.beta1 * slot["m"].astype(np.float64) + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * slot["v"].astype(np.float64) + (1.0 - cfg.beta2) * g * g
            vhat = v / bc2
            if cfg.amsgrad:
                vhat = np.maximum(slot["vmax"].astype(np.float64), vhat)
                slot["vmax"] = vhat.astype(np.float32)
            slot["m"], slot["v"] = m.astype(np.float32), v.astype(np.float32)
            update = step_lr * (m / bc1) / (np.sqrt(vhat) + cfg.eps)
            if decays and cfg.decay == "decoupled":
                update = update + step_lr * cfg.weight_decay * w
            p.data = (w - update).astype(np.float32)

    def state_entries(self) -> dict[str, np.ndarray]:
        """Flat snapshot for checkpointing; restoring it resumes bit-exactly."""
        out = {}
        for name, slot in self.state.items():
            for key, arr in slot.items():
                out[f"__optim__.{key}.{name}"] = arr
        return out

    def load_entries(self, entries: dict[str, np.ndarray], step: int) -> None:
        self.t = step
        self.state = {}
        for key, arr in entries.items():
            if not key.startswith("__optim__."):
                continue
            _, slot_key, name = key.split(".", 2)
            self.state.setdefault(name, {})[slot_key] = arr.astype(np.float32)


@dataclass(frozen=True)
class LrSchedule:
    kind: str = "step"
    poly_power: float = 0.9
    poly_max_iter: float = 1e8
    step_factor: float = 0.85
    step_every: int = 15
    multistep_factor: float = 0.56
    multistep_epochs: tuple[int, ...] = (4, 8, 16, 24, 32, 96, 128)

    def __post_init__(self):
        if self.kind not in ("poly", "step", "multistep"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        object.__setattr__(self, "multistep_epochs", tuple(sorted(int(e) for e in self.multistep_epochs)))
        if self.step_every < 1 or self.poly_max_iter <= 0:
            raise ValueError("step_every must be >= 1 and poly_max_iter > 0")

    @property
    def per_iteration(self) -> bool:
        return self.kind == "poly"


def lr_at(schedule: LrSchedule, counter: float) -> float:
    """Multiplier on the base rate; ``counter`` is the iteration for poly, else the epoch."""
    if counter < 0:
        raise ValueError("schedule counter must be non-negative")
    if schedule.kind == "poly":
        frac = min(counter / schedule.poly_max_iter, 1.0)
        return float((1.0 - frac) ** schedule.poly_power)
    if schedule.kind == "step":
        return float(schedule.step_factor ** (int(counter) // schedule.step_every))
    passed = sum(1 for e in schedule.multistep_epochs if counter >= e)
    return float(schedule.multistep_factor ** passed)
