import numpy as np
import pytest

from ddcmnet import augment as A
from ddcmnet.data import SceneSpec, generate_tile


def _tile(size=64, seed=0):
    return generate_tile(SceneSpec(size=size, seed=seed), 0)


def test_zero_probabilities_are_identity():
    img, lab = _tile()
    out_img, out_lab = A.augment(img, lab, A.AugmentConfig(0, 0, 0), np.random.default_rng(0))
    np.testing.assert_array_equal(out_img, (img / 255.0).astype(np.float32))
    np.testing.assert_array_equal(out_lab, lab)


def test_flips_are_involutions():
    img, lab = _tile()
    for flip in (A.hflip, A.vflip):
        twice = flip(*flip(img, lab))
        np.testing.assert_array_equal(twice[0], img)
        np.testing.assert_array_equal(twice[1], lab)


def test_always_flip_matches_numpy():
    img, lab = _tile()
    out_img, out_lab = A.augment(img, lab, A.AugmentConfig(1, 1, 0), np.random.default_rng(0))
    np.testing.assert_array_equal(out_lab, lab[::-1, ::-1])


def test_rotation_round_trip_preserves_interior_histogram():
    img, lab = _tile(size=256, seed=2)
    _, rot = A.warp(img, lab, (0, 0), 1.0, 10.0)
    _, back = A.warp(img, rot, (0, 0), 1.0, -10.0)
    inner = slice(48, 208)
    a = np.bincount(lab[inner, inner].ravel(), minlength=6) / lab[inner, inner].size
    b = np.bincount(back[inner, inner].ravel(), minlength=6) / back[inner, inner].size
    assert np.abs(a - b).max() < 0.02
    assert back.dtype == lab.dtype
    assert set(np.unique(back)) <= set(np.unique(lab))


def test_identity_warp_is_exact():
    img, lab = _tile()
    w_img, w_lab = A.warp(img.astype(np.float64), lab, (0, 0), 1.0, 0.0)
    np.testing.assert_allclose(w_img, img, atol=1e-9)
    np.testing.assert_array_equal(w_lab, lab)


def test_augment_is_keyed_by_rng_and_outputs_types():
    img, lab = _tile()
    cfg = A.AugmentConfig(affine_p=1.0)
    a = A.augment(img, lab, cfg, A.sample_rng(1, 2, 3))
    b = A.augment(img, lab, cfg, A.sample_rng(1, 2, 3))
    np.testing.assert_array_equal(a[0], b[0])
    assert a[0].dtype == np.float32 and a[1].dtype == np.int64
    assert 0.0 <= a[0].min() and a[0].max() <= 1.0
    with pytest.raises(ValueError):
        A.augment(img, lab[:10], cfg, A.sample_rng(0, 0, 0))
    with pytest.raises(ValueError):
        A.AugmentConfig(flip_p=1.5)


def test_single_tile_of_patch_size_is_whole_tile():
    img, lab = _tile(size=32)
    patches = list(A.sample_patches([(img, lab)], patch=32, count=4))
    assert len(patches) == 4
    for p_img, p_lab in patches:
        np.testing.assert_array_equal(p_lab, lab)
    with pytest.raises(ValueError):
        A.patch_origins([(16, 16)], 32, 1, 0, 0)


def test_patch_origins_reproducible_and_epoch_keyed():
    shapes = [(64, 64), (80, 70)]
    a = A.patch_origins(shapes, 32, 50, seed=1, epoch=0)
    assert a == A.patch_origins(shapes, 32, 50, seed=1, epoch=0)
    assert a != A.patch_origins(shapes, 32, 50, seed=1, epoch=1)
    for t, y, x in a:
        h, w = shapes[t]
        assert 0 <= y <= h - 32 and 0 <= x <= w - 32


def test_patch_origins_uniform_over_quadrants():
    n, size, patch = 10_000, 512, 256
    origins = A.patch_origins([(size, size)], patch, n, seed=0, epoch=0)
    span = size - patch + 1
    ys = np.array([o[1] for o in origins])
    xs = np.array([o[2] for o in origins])
    quad = (ys >= span // 2).astype(int) * 2 + (xs >= span // 2)
    counts = np.bincount(quad, minlength=4)
    half = span // 2 / span
    probs = np.array([half * half, half * (1 - half), (1 - half) * half, (1 - half) ** 2])
    sigma = np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) < 3 * sigma)
