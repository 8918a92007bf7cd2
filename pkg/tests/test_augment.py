import dataclasses

import numpy as np
import pytest

from selfkp import augment
from selfkp.augment import FILTER_ORDER, NoiseConfig


def textured(rng, size=48):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.clip(0.5 + 0.3 * np.sin(xx / 3.0) * np.cos(yy / 5.0) + 0.05 * rng.standard_normal((size, size)), 0, 1)


@pytest.mark.parametrize("kind", FILTER_ORDER)
def test_each_filter_stays_in_range_and_shape(kind, rng):
    img = textured(rng)
    out = augment.apply_filter(kind, img, rng)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_unknown_filter():
    with pytest.raises(ValueError, match="unknown filter"):
        augment.apply_filter("sepia", np.zeros((4, 4)), np.random.default_rng(0))


def test_skip_everything_is_identity(rng):
    img = textured(rng)
    out = augment.apply_pipeline(img, rng, NoiseConfig(skip_probability=1.0))
    assert np.array_equal(out, img)


def test_deterministic_given_seed(rng):
    img = textured(rng)
    a = augment.apply_pipeline(img, np.random.default_rng(7))
    b = augment.apply_pipeline(img, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_salt_pepper_fraction_zero_is_noop(rng):
    img = textured(rng)
    cfg = NoiseConfig(salt_pepper_fraction=(0.0, 0.0))
    assert np.array_equal(augment.apply_filter("salt_pepper", img, rng, cfg), img)


def test_salt_pepper_fraction_respected(rng):
    img = np.full((200, 200), 0.5)
    cfg = NoiseConfig(salt_pepper_fraction=(0.05, 0.05))
    out = augment.apply_filter("salt_pepper", img, rng, cfg)
    changed = out != 0.5
    assert abs(changed.mean() - 0.05) < 0.01
    assert set(np.unique(out[changed])) <= {0.0, 1.0}


def test_motion_blur_kernel_normalised():
    for length in (3, 5, 7):
        for angle in (0.0, 0.7, np.pi / 2):
            k = augment.motion_blur_kernel(length, angle)
            assert k.shape == (length, length)
            assert abs(k.sum() - 1.0) < 1e-12


def test_motion_blur_preserves_constant(rng):
    img = np.full((20, 20), 0.3)
    assert np.allclose(augment.apply_filter("motion_blur", img, rng), 0.3)


def test_contrast_keeps_mean_without_clipping(rng):
    img = 0.4 + 0.1 * rng.random((30, 30))
    out = augment.apply_filter("contrast_scale", img, rng)
    assert abs(out.mean() - img.mean()) < 1e-12


def test_brightness_shifts_uniformly(rng):
    img = 0.5 + 0.1 * rng.random((10, 10))
    out = augment.apply_filter("random_brightness", img, rng)
    delta = out - img
    assert np.allclose(delta, delta.flat[0])


def test_variance_guard_reverts_flattening_filter(rng, monkeypatch):
    img = textured(rng)
    monkeypatch.setitem(augment._FILTERS, "contrast_scale", lambda im, r, c: np.full_like(im, im.mean()))
    cfg = NoiseConfig(skip_probability=0.0)
    out = augment.apply_pipeline(img, rng, cfg)
    assert out.var() >= cfg.variance_guard_ratio * img.var()
    assert out.var() > 0


def test_variance_guard_over_many_seeds(rng):
    cfg = NoiseConfig(contrast_range=(0.05, 1.5), shade_strength=(0.0, 0.9))
    base = textured(rng, 32)
    for seed in range(300):
        out = augment.apply_pipeline(base, np.random.default_rng(seed), cfg)
        assert out.var() >= cfg.variance_guard_ratio * base.var()


@pytest.mark.parametrize("field,value", [
    ("gaussian_sigma", (0.1, 0.0)),
    ("salt_pepper_fraction", (-0.1, 0.1)),
    ("motion_blur_kernel", ()),
    ("skip_probability", 1.5),
    ("variance_guard_ratio", 0.0),
])
def test_config_validation(field, value):
    with pytest.raises(ValueError):
        dataclasses.replace(NoiseConfig(), **{field: value})
