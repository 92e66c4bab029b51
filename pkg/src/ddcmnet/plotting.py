"""Report figures written next to the CSV/text outputs."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def loss_curve(rows, path) -> None:
    """Training loss per epoch with validation mIoU on a twin axis."""
    epochs = [r["epoch"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(epochs, [r["loss"] for r in rows], "o-", color="#1f4e79", ms=3, label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("weighted cross-entropy")
        val = [(e, r["val_mIoU"]) for e, r in zip(epochs, rows) if not math.isnan(r["val_mIoU"])]
        if val:
            ax2 = ax.twinx()
            ax2.plot(*zip(*val), "s--", color="#c55a11", ms=3, label="val mIoU")
            ax2.set_ylabel("val mIoU")
            ax2.set_ylim(0, 1)
            ax2.spines["right"].set_visible(True)
            ax2.spines["top"].set_visible(False)
        fig.savefig(path)
        plt.close(fig)


def confusion_figure(norm: np.ndarray, names, path, title: str = "row-normalised confusion") -> None:
    c = norm.shape[0]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.0 + 0.6 * c, 0.8 + 0.6 * c))
        im = ax.imshow(norm, vmin=0.0, vmax=1.0, cmap="Blues")
        for i in range(c):
            for j in range(c):
                ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center", fontsize=7,
                        color="white" if norm[i, j] > 0.5 else "black")
        ax.set_xticks(range(c), names, rotation=45, ha="right")
        ax.set_yticks(range(c), names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("reference")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        fig.savefig(path)
        plt.close(fig)


def flops_figure(report, path, convention: str = "mac1") -> None:
    """Horizontal bars of FLOPs per top-level block."""
    totals: dict[str, int] = {}
    for layer in report.layers:
        top = layer.name.split(".")[0]
        totals[top] = totals.get(top, 0) + layer.flops(convention)
    names = list(totals)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 0.5 + 0.3 * len(names)))
        ax.barh(names, [totals[n] / 1e9 for n in names], color="#2e75b6")
        ax.invert_yaxis()
        ax.set_xlabel(f"GFLOPs ({convention})")
        ax.set_title(f"input {'x'.join(map(str, report.input_shape))}, "
                     f"total {report.flops(convention) / 1e9:.2f} G")
        fig.savefig(path)
        plt.close(fig)
