"""Geometric augmentation and reproducible patch sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    mirror_p: float = 0.5
    affine_p: float = 0.5
    shift_limit: float = 0.0625
    scale_limit: float = 0.1
    rotate_limit: float = 10.0

    def __post_init__(self):
        for name in ("flip_p", "mirror_p", "affine_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability in [0, 1], got {v}")
        if self.shift_limit < 0 or not 0 <= self.scale_limit < 1 or self.rotate_limit < 0:
            raise ValueError("shift/rotate limits must be >= 0 and scale_limit in [0, 1)")


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample stream, independent of which worker handles the sample."""
    return np.random.default_rng([seed, epoch, index])


def hflip(image: np.ndarray, label: np.ndarray):
    return image[:, :, ::-1], label[:, ::-1]


def vflip(image: np.ndarray, label: np.ndarray):
    return image[:, ::-1, :], label[::-1, :]


def affine_matrix(h: int, w: int, shift: tuple[float, float], scale: float, angle_deg: float):
    """Output->input mapping for a rotation/scale about the centre plus a shift in pixels."""
    a = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]) / scale
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - rot @ (centre + np.array([shift[0] * h, shift[1] * w]))
    return rot, offset


def warp(image: np.ndarray, label: np.ndarray, shift, scale: float, angle_deg: float):
    """Apply one transform to both maps: bilinear for the image, nearest for labels."""
    h, w = label.shape
    mat, off = affine_matrix(h, w, shift, scale, angle_deg)
    img = np.stack([ndimage.affine_transform(ch.astype(np.float64), mat, off, order=1, mode="reflect")
                    for ch in image])
    lab = ndimage.affine_transform(label, mat, off, order=0, mode="reflect")
    return img, lab


def augment(image: np.ndarray, label: np.ndarray, config: AugmentConfig, rng: np.random.Generator):
    """Augment an 8-bit (3,h,w) image and its (h,w) label; returns float32 in [0,1] and int64 labels.

    The draw order is fixed so a given rng always produces the same transform.
    """
    if image.shape[1:] != label.shape:
        raise ValueError(f"image {image.shape[1:]} and label {label.shape} are not aligned")
    do_mirror = rng.random() < config.mirror_p
    do_flip = rng.random() < config.flip_p
    do_affine = rng.random() < config.affine_p
    params = (rng.uniform(-config.shift_limit, config.shift_limit, 2),
              rng.uniform(1 - config.scale_limit, 1 + config.scale_limit),
              rng.uniform(-config.rotate_limit, config.rotate_limit))
    img, lab = image, label
    if do_mirror:
        img, lab = hflip(img, lab)
    if do_flip:
        img, lab = vflip(img, lab)
    img = img.astype(np.float64)
    if do_affine:
        shift, scale, angle = params
        img, lab = warp(img, lab, tuple(shift), scale, angle)
        img = np.clip(img, 0.0, 255.0)
    return (img / 255.0).astype(np.float32), np.ascontiguousarray(lab, dtype=np.int64)


def patch_origins(tile_shapes, patch: int, count: int, seed: int, epoch: int):
    """``count`` uniformly drawn ``(tile, y, x)`` origins for one epoch.

    Origins are drawn from a stream keyed by (seed, epoch), so each epoch gets
    a fresh shuffle while reruns repeat exactly.
    """
    if count < 1:
        raise ValueError("patch count must be >= 1")
    for i, (h, w) in enumerate(tile_shapes):
        if h < patch or w < patch:
            raise ValueError(f"tile {i} is {h}x{w}, smaller than patch size {patch}")
    rng = np.random.default_rng([seed, epoch, 0x5A])
    tiles = rng.integers(0, len(tile_shapes), count)
    out = []
    for t in tiles:
        h, w = tile_shapes[t]
        out.append((int(t), int(rng.integers(0, h - patch + 1)), int(rng.integers(0, w - patch + 1))))
    return out


def sample_patches(tiles, patch: int = 256, count: int = 5000, seed: int = 0, epoch: int = 0):
    """Yield ``(image_patch, label_patch)`` pairs from ``[(image, label), ...]`` tiles."""
    shapes = [lab.shape for _, lab in tiles]
    for t, y, x in patch_origins(shapes, patch, count, seed, epoch):
        img, lab = tiles[t]
        yield img[:, y:y + patch, x:x + patch], lab[y:y + patch, x:x + patch]
