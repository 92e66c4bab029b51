"""Training loop: augmented patches, weighted loss, AMSGrad steps, validation, checkpoints."""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import augment as A
from .config import Config, render_config
from .data import Dataset, split
from .inference import full_plan, predict_stitched
from .loss import mfb_weights, weighted_ce_loss
from .metrics import ConfusionMatrix, accumulate, scores
from .network import Network, build_network, load_checkpoint, save_checkpoint
from .optim import AdamAMSGrad, lr_at

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "iter", "lr", "loss", "val_mIoU", "val_mF1", "wall_seconds")
CHECKPOINT = "checkpoint.ddcm"
LOG_NAME = "train_log.csv"
NAN_DUMP = "nan_dump.ddcm"
PAD_LABEL = -1


class NumericError(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class TrainResult:
    net: Network
    rows: list[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    class_weights: Optional[np.ndarray] = None


def _state_text(epoch: int, step: int) -> str:
    return f"epoch={epoch}\nstep={step}\n"


def _parse_state(text: str) -> tuple[int, int]:
    kv = dict(line.split("=", 1) for line in text.split() if "=" in line)
    return int(kv["epoch"]), int(kv["step"])


def pad_batch(x: np.ndarray, y: np.ndarray, multiple: int):
    """Pad to a multiple of the network stride; padded labels are ignored by the loss."""
    h, w = y.shape[1:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return x, y
    x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    y = np.pad(y, ((0, 0), (0, ph), (0, pw)), constant_values=PAD_LABEL)
    return x, y


def class_weights_for(config: Config, dataset: Dataset, train_idx) -> np.ndarray:
    if not config.train.mfb:
        return np.ones(dataset.num_classes)
    return mfb_weights(dataset.frequencies(train_idx))


def evaluate(net: Network, tiles, num_classes: int, exclude=(), ignore_id=None) -> tuple[float, float]:
    """Whole-tile eval-mode prediction; returns ``(mIoU, mF1)``."""
    cm = ConfusionMatrix(num_classes)
    stride = net.spec.backbone.stride
    for image, label in tiles:
        h, w = label.shape
        hh, ww = h - h % stride, w - w % stride
        img = (image[:, :hh, :ww] / np.float32(255.0)).astype(np.float32)
        pred, _ = predict_stitched(net, img, full_plan(hh, ww))
        accumulate(cm, pred, label[:hh, :ww], ignore_id)
    s = scores(cm, exclude)
    return s.mean_iou, s.mean_f1


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, LOG_COLUMNS, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow(r)


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"], r["iter"] = int(r["epoch"]), int(r["iter"])
        for k in ("lr", "loss", "val_mIoU", "val_mF1", "wall_seconds"):
            r[k] = float(r[k]) if r[k] not in ("", "nan") else float("nan")
    return rows


def train(config: Config, data_dir, out_dir, workers: int = 1, resume: Optional[Path] = None,
          stop_after: Optional[int] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train ``config.network`` on the dataset in ``data_dir``.

    Writes ``checkpoint.ddcm`` after every epoch and ``train_log.csv``.
    ``stop_after`` ends the run after that many total epochs (for resume
    tests); results do not depend on ``workers``.
    """
    tc = config.train
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = Dataset(data_dir)
    spec = config.network
    if dataset.num_classes != spec.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, network expects {spec.num_classes}")
    train_idx, val_idx, _ = split(len(dataset), config.split, tc.seed)
    train_tiles = [dataset.raw(i) for i in train_idx]
    val_tiles = [dataset.raw(i) for i in val_idx]
    weights = class_weights_for(config, dataset, train_idx)
    config_text = render_config(config)

    opt = AdamAMSGrad(config.optimizer)
    rows: list[dict] = []
    start_epoch, step = 0, 0
    if resume is not None:
        net, _, extra, state_text = load_checkpoint(resume)
        start_epoch, step = _parse_state(state_text)
        opt.load_entries(extra, step)
        log_path = Path(resume).parent / LOG_NAME
        if log_path.exists():
            rows = [r for r in read_log(log_path) if r["epoch"] < start_epoch]
    else:
        net = build_network(spec, seed=tc.seed)

    schedule = config.schedule
    shapes = [lab.shape for _, lab in train_tiles]
    stride = net.spec.backbone.stride
    aug_cfg = config.augment
    t0 = time.perf_counter() - (rows[-1]["wall_seconds"] if rows else 0.0)
    last = tc.epochs if stop_after is None else min(tc.epochs, stop_after)

    def prepare(epoch, item):
        idx, (t, y, x) = item
        img, lab = train_tiles[t]
        p = tc.patch
        rng = A.sample_rng(tc.seed, epoch, idx)
        a_img, a_lab = A.augment(img[:, y:y + p, x:x + p], lab[y:y + p, x:x + p], aug_cfg, rng)
        if tc.ignore_id is not None:
            a_lab = np.where(a_lab == tc.ignore_id, PAD_LABEL, a_lab)
        return a_img, a_lab

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for epoch in range(start_epoch, last):
            items = list(enumerate(A.patch_origins(shapes, tc.patch, tc.patches, tc.seed, epoch)))
            losses = []
            lr = config.optimizer.lr
            for b0 in range(0, len(items), tc.batch):
                chunk = items[b0:b0 + tc.batch]
                prep = lambda it, e=epoch: prepare(e, it)
                batch = list(pool.map(prep, chunk)) if pool else [prep(it) for it in chunk]
                x = np.stack([s[0] for s in batch])
                y = np.stack([s[1] for s in batch])
                x, y = pad_batch(x, y, stride)
                counter = step if schedule.per_iteration else epoch
                lr = config.optimizer.lr * lr_at(schedule, counter)
                net.zero_grad()
                logits = net.forward(x, train=True)
                loss, grad = weighted_ce_loss(logits, y, weights, ignore_id=PAD_LABEL)
                if not np.isfinite(loss):
                    dump = out / NAN_DUMP
                    save_checkpoint(dump, net, config_text, {"__batch_images__": x,
                                                             "__batch_labels__": y.astype(np.float32)},
                                    _state_text(epoch, step))
                    raise NumericError(f"non-finite loss {loss} at epoch {epoch} iteration {step}; "
                                       f"state dumped to {dump}")
                net.backward(grad)
                opt.step(net.named_parameters(), lr)
                losses.append(loss)
                step += 1
            row = {"epoch": epoch, "iter": step, "lr": lr, "loss": float(np.mean(losses)),
                   "val_mIoU": float("nan"), "val_mF1": float("nan")}
            if val_tiles and ((epoch + 1) % tc.val_every == 0 or epoch + 1 == tc.epochs):
                row["val_mIoU"], row["val_mF1"] = evaluate(net, val_tiles, spec.num_classes,
                                                           config.exclude, tc.ignore_id)
            row["wall_seconds"] = round(time.perf_counter() - t0, 3)
            rows.append(row)
            save_checkpoint(out / CHECKPOINT, net, config_text, opt.state_entries(),
                            _state_text(epoch + 1, step))
            _write_log(out / LOG_NAME, rows)
            log.info("epoch %d loss %.5f val mIoU %.4f (%.1fs)", epoch, row["loss"],
                     row["val_mIoU"], row["wall_seconds"])
            if on_epoch is not None:
                on_epoch(row)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainResult(net, rows, out / CHECKPOINT, weights)
