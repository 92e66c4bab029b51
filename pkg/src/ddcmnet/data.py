"""Synthetic aerial-style scenes, dataset layout, splits and PPM/PGM I/O.

A scene is painted top-down: each class family places shapes only into
pixels no earlier family has claimed, until its pixel-frequency target is
met.  Whatever is left becomes the background surface class.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

CLASS_NAMES = ("surface", "building", "low_vegetation", "tree", "car", "clutter", "unknown")
MAX_CLASSES = len(CLASS_NAMES)
# Default pixel shares for classes 1..6; class 0 takes whatever remains.
DEFAULT_TARGETS = (0.24, 0.18, 0.16, 0.03, 0.015, 0.02)
# Order in which families claim pixels: small objects first so big rectangles
# never swallow them.
PAINT_ORDER = (4, 5, 6, 1, 3, 2)

BASE_COLORS = {
    0: (128, 126, 122),
    1: (172, 168, 160),
    2: (128, 168, 84),
    3: (46, 96, 42),
    5: (176, 138, 64),
    6: (12, 12, 14),
}
ROOF_COLORS = ((172, 168, 160), (160, 84, 62), (110, 112, 118))
CAR_COLORS = ((200, 32, 30), (34, 44, 190), (236, 236, 236), (24, 24, 26), (225, 200, 40))


class DataError(IOError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    size: int = 512
    classes: int = 6
    targets: Optional[tuple[float, ...]] = None
    noise: float = 0.06
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.classes <= MAX_CLASSES:
            raise ValueError(f"classes must lie in [1, {MAX_CLASSES}], got {self.classes}")
        if self.size < 16:
            raise ValueError("tile size must be >= 16")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        t = self.class_targets()
        if any(v < 0 for v in t) or sum(t[1:]) >= 1:
            raise ValueError("class targets must be non-negative and leave room for class 0")

    def class_targets(self) -> tuple[float, ...]:
        if self.targets is not None:
            if len(self.targets) != self.classes:
                raise ValueError(f"expected {self.classes} targets, got {len(self.targets)}")
            return tuple(float(v) for v in self.targets)
        rest = DEFAULT_TARGETS[: self.classes - 1]
        return (1.0 - sum(rest),) + rest


def tile_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, 0xDA7A])


def _ellipse(h, w, cy, cx, ry, rx, angle):
    y0, y1 = max(0, int(cy - max(ry, rx)) - 1), min(h, int(cy + max(ry, rx)) + 2)
    x0, x1 = max(0, int(cx - max(ry, rx)) - 1), min(w, int(cx + max(ry, rx)) + 2)
    y1, x1 = max(y0, y1), max(x0, x1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    c, s = np.cos(angle), np.sin(angle)
    u = ((yy - cy) * c + (xx - cx) * s) / ry
    v = (-(yy - cy) * s + (xx - cx) * c) / rx
    return (slice(y0, y1), slice(x0, x1)), u * u + v * v <= 1.0


def _rect(h, w, y, x, rh, rw):
    return (slice(max(0, y), min(h, y + rh)), slice(max(0, x), min(w, x + rw)))


class _Painter:
    def __init__(self, size, rng):
        self.h = self.w = size
        self.rng = rng
        self.label = np.full((size, size), -1, dtype=np.int64)
        self.color = np.zeros((3, size, size), dtype=np.float64)

    def claim(self, cls, sl, mask, rgb):
        free = self.label[sl] < 0
        if mask is not None:
            free &= mask
        self.label[sl][free] = cls
        for ch in range(3):
            self.color[ch][sl][free] = rgb[ch]
        return int(free.sum())

    def shape(self, cls):
        rng, h, w = self.rng, self.h, self.w
        if cls == 1:
            rh, rw = rng.integers(40, 120, 2)
            y, x = rng.integers(-20, h - 20), rng.integers(-20, w - 20)
            sl = _rect(h, w, y, x, rh, rw)
            rgb = ROOF_COLORS[rng.integers(len(ROOF_COLORS))]
            got = self.claim(cls, sl, None, rgb)
            # darker rim so roofs read as raised structures
            region = self.label[sl] == cls
            rim = np.zeros_like(region)
            rim[:2], rim[-2:], rim[:, :2], rim[:, -2:] = True, True, True, True
            for ch in range(3):
                self.color[ch][sl][region & rim] = rgb[ch] * 0.7
            return got
        if cls == 2:
            sl, m = _ellipse(h, w, rng.uniform(0, h), rng.uniform(0, w),
                             rng.uniform(20, 60), rng.uniform(20, 60), rng.uniform(0, np.pi))
            return self.claim(cls, sl, m, BASE_COLORS[2])
        if cls == 3:
            cy, cx, got = rng.uniform(0, h), rng.uniform(0, w), 0
            for _ in range(int(rng.integers(3, 8))):
                r = rng.uniform(8, 18)
                sl, m = _ellipse(h, w, cy + rng.normal(0, 14), cx + rng.normal(0, 14), r, r, 0.0)
                got += self.claim(cls, sl, m, BASE_COLORS[3])
            return got
        if cls == 4:
            long_, short = int(rng.integers(26, 34)), int(rng.integers(14, 18))
            rh, rw = (long_, short) if rng.random() < 0.5 else (short, long_)
            sl = _rect(h, w, int(rng.integers(0, h - rh)), int(rng.integers(0, w - rw)), rh, rw)
            return self.claim(cls, sl, None, CAR_COLORS[rng.integers(len(CAR_COLORS))])
        if cls == 5:
            cy, cx, got = rng.uniform(0, h), rng.uniform(0, w), 0
            for _ in range(int(rng.integers(2, 5))):
                sl, m = _ellipse(h, w, cy + rng.normal(0, 6), cx + rng.normal(0, 6),
                                 rng.uniform(4, 12), rng.uniform(3, 8), rng.uniform(0, np.pi))
                got += self.claim(cls, sl, m, BASE_COLORS[5])
            return got
        sl = _rect(h, w, int(rng.integers(-30, h)), int(rng.integers(-30, w)),
                   int(rng.integers(30, 90)), int(rng.integers(30, 90)))
        return self.claim(cls, sl, None, BASE_COLORS[6])


def generate_tile(spec: SceneSpec, index: int):
    """One ``(image uint8 (3,s,s), label uint8 (s,s))`` pair."""
    rng = tile_rng(spec.seed, index)
    painter = _Painter(spec.size, rng)
    targets = spec.class_targets()
    area = spec.size * spec.size
    for cls in PAINT_ORDER:
        if cls >= spec.classes or targets[cls] <= 0:
            continue
        goal = targets[cls] * area
        got, attempts = 0, 0
        while got < goal and attempts < 2000:
            got += painter.shape(cls)
            attempts += 1
    bg = painter.label < 0
    painter.label[bg] = 0
    for ch in range(3):
        painter.color[ch][bg] = BASE_COLORS[0][ch]
    img = painter.color
    if spec.classes > 3 and (painter.label == 3).any():
        # canopy texture: fine-grained brightness variation on trees only
        tex = rng.normal(0.0, 18.0, img.shape[1:])
        img = img + np.where(painter.label == 3, tex, 0.0)[None]
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise * 255.0, img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return image, painter.label.astype(np.uint8)


# -- file I/O -----------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] != 3 or image.dtype != np.uint8:
        raise DataError(f"PPM data must be uint8 (3,h,w), got {image.dtype} {image.shape}")
    Image.fromarray(np.ascontiguousarray(image.transpose(1, 2, 0)), "RGB").save(path, format="PPM")


def write_pgm(path, gray: np.ndarray) -> None:
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise DataError(f"PGM data must be uint8 (h,w), got {gray.dtype} {gray.shape}")
    Image.fromarray(np.ascontiguousarray(gray), "L").save(path, format="PPM")


def _open(path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode != mode:
                raise DataError(f"{path}: expected 8-bit {'P6' if mode == 'RGB' else 'P5'}, "
                                f"got {im.format} mode {im.mode}")
            return np.asarray(im)
    except DataError:
        raise
    except FileNotFoundError as exc:
        raise DataError(f"{path}: no such file") from exc
    except (OSError, ValueError, SyntaxError) as exc:
        raise DataError(f"{path}: malformed image ({exc})") from exc


def read_ppm(path) -> np.ndarray:
    return np.ascontiguousarray(_open(path, "RGB").transpose(2, 0, 1))


def read_pgm(path) -> np.ndarray:
    return _open(path, "L").copy()


def load_pair(image_path, label_path, raw: bool = False):
    """Image as float32 (3,h,w) in [0,1] (or uint8 with ``raw``) and labels as int64 (h,w)."""
    image, label = read_ppm(image_path), read_pgm(label_path)
    if image.shape[1:] != label.shape:
        raise DataError(f"pairing error: {image_path} is {image.shape[1:]}, {label_path} is {label.shape}")
    if raw:
        return image, label.astype(np.int64)
    return (image / np.float32(255.0)).astype(np.float32), label.astype(np.int64)


def save_pair(image_path, label_path, image: np.ndarray, label: np.ndarray) -> None:
    """Inverse of :func:`load_pair`; float images are mapped back with ``round(v*255)``."""
    if image.shape[1:] != label.shape:
        raise DataError(f"pairing error: image {image.shape[1:]} vs label {label.shape}")
    if image.dtype != np.uint8:
        image = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if label.min(initial=0) < 0 or label.max(initial=0) > 255:
        raise DataError("labels must fit in 8 bits")
    write_ppm(image_path, image)
    write_pgm(label_path, label.astype(np.uint8))


# -- dataset directories ------------------------------------------------

def tile_name(index: int) -> str:
    return f"{index:04d}"


def generate(out_dir, spec: SceneSpec, tiles: int, workers: int = 1) -> np.ndarray:
    """Write ``tiles`` scenes plus ``manifest.csv``; returns the (tiles, classes) count table."""
    if tiles < 1:
        raise ValueError("tiles must be >= 1")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out}: {exc}") from exc

    def one(i):
        image, label = generate_tile(spec, i)
        save_pair(out / "images" / f"{tile_name(i)}.ppm", out / "labels" / f"{tile_name(i)}.pgm", image, label)
        return np.bincount(label.ravel(), minlength=spec.classes)

    try:
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(workers) as pool:
                counts = list(pool.map(one, range(tiles)))
        else:
            counts = [one(i) for i in range(tiles)]
    except OSError as exc:
        raise DataError(f"cannot write dataset under {out}: {exc}") from exc
    table = np.stack(counts).astype(np.int64)
    write_manifest(out / "manifest.csv", table)
    return table


def write_manifest(path, counts: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["tile"] + [f"count_{c}" for c in range(counts.shape[1])])
        for i, row in enumerate(counts):
            wr.writerow([tile_name(i)] + [int(v) for v in row])


def read_manifest(path) -> tuple[list[str], np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not rows or rows[0][0] != "tile":
        raise DataError(f"{path}: not a dataset manifest")
    try:
        ids = [r[0] for r in rows[1:]]
        counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{path}: malformed count ({exc})") from exc
    return ids, counts.reshape(len(ids), len(rows[0]) - 1)


class Dataset:
    """A generated dataset directory; tiles load lazily as raw 8-bit arrays."""

    def __init__(self, root):
        self.root = Path(root)
        self.ids, self.counts = read_manifest(self.root / "manifest.csv")
        self.num_classes = self.counts.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def paths(self, i: int):
        t = self.ids[i]
        return self.root / "images" / f"{t}.ppm", self.root / "labels" / f"{t}.pgm"

    def raw(self, i: int):
        return load_pair(*self.paths(i), raw=True)

    def frequencies(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        rows = self.counts if indices is None else self.counts[list(indices)]
        total = rows.sum()
        if total == 0:
            raise DataError("selected tiles contain no pixels")
        return rows.sum(axis=0) / total


def split(n: int, fractions: Sequence[float], seed: int = 0) -> list[list[int]]:
    """Shuffle ``range(n)`` and cut it into parts sized by ``fractions``.

    Each part first gets ``floor(f*n)`` items; the leftover items go one each
    to the parts with the largest fractional remainders (earlier part on ties).
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or fr.size == 0 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {list(fractions)}")
    exact = fr * n
    sizes = np.floor(exact + 1e-9).astype(int)
    remainder = exact - sizes
    for i in sorted(range(fr.size), key=lambda j: (-remainder[j], j))[: n - int(sizes.sum())]:
        sizes[i] += 1
    empty = [i for i in range(fr.size) if fr[i] > 0 and sizes[i] == 0]
    if empty:
        raise ValueError(f"{n} tiles are too few for split fractions {list(fractions)}: part(s) {empty} empty")
    order = np.random.default_rng([seed, 0x5B17]).permutation(n)
    parts, start = [], 0
    for s in sizes:
        parts.append(sorted(int(v) for v in order[start:start + s]))
        start += s
    return parts
