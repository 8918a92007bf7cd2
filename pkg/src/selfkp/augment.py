"""Photometric noise applied independently to each image of a training pair."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

FILTER_ORDER = (
    "additive_gaussian",
    "random_brightness",
    "additive_shade",
    "salt_pepper",
    "motion_blur",
    "contrast_scale",
)


@dataclass(frozen=True)
class NoiseConfig:
    # (low, high) ranges the per-image parameter is drawn from
    gaussian_sigma: tuple[float, float] = (0.0, 0.04)
    brightness_delta: tuple[float, float] = (-0.15, 0.15)
    shade_strength: tuple[float, float] = (0.0, 0.4)
    salt_pepper_fraction: tuple[float, float] = (0.0, 0.02)
    # odd kernel lengths to choose from; 1 disables the blur
    motion_blur_kernel: tuple[int, ...] = (3, 5, 7)
    contrast_range: tuple[float, float] = (0.5, 1.5)
    skip_probability: float = 0.5
    variance_guard_ratio: float = 0.10

    def __post_init__(self):
        for name in ("gaussian_sigma", "brightness_delta", "shade_strength", "salt_pepper_fraction", "contrast_range"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"{name}: high < low")
        for name in ("gaussian_sigma", "shade_strength", "salt_pepper_fraction", "contrast_range"):
            if getattr(self, name)[0] < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.motion_blur_kernel or min(self.motion_blur_kernel) < 1:
            raise ValueError("motion_blur_kernel needs positive lengths")
        if not 0.0 <= self.skip_probability <= 1.0:
            raise ValueError("skip_probability must lie in [0, 1]")
        if not 0.0 < self.variance_guard_ratio < 1.0:
            raise ValueError("variance_guard_ratio must lie in (0, 1)")


def _additive_gaussian(img, rng, cfg):
    sigma = rng.uniform(*cfg.gaussian_sigma)
    if sigma == 0.0:
        return img.copy()
    return img + rng.normal(0.0, sigma, size=img.shape)


def _random_brightness(img, rng, cfg):
    return img + rng.uniform(*cfg.brightness_delta)


def _additive_shade(img, rng, cfg):
    strength = rng.uniform(*cfg.shade_strength)
    if strength == 0.0:
        return img.copy()
    h, w = img.shape
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    ay = rng.uniform(h / 8, h / 2)
    ax = rng.uniform(w / 8, w / 2)
    angle = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    inside = ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0).astype(np.float64)
    soft = ndimage.gaussian_filter(inside, sigma=max(2.0, min(ax, ay) / 4))
    return img * (1.0 - strength * soft)


def _salt_pepper(img, rng, cfg):
    frac = rng.uniform(*cfg.salt_pepper_fraction)
    out = img.copy()
    hit = rng.random(img.shape) < frac
    out[hit] = (rng.random(int(hit.sum())) < 0.5).astype(np.float64)
    return out


def motion_blur_kernel(length: int, angle: float) -> np.ndarray:
    """Normalised line kernel of ``length`` pixels at ``angle`` radians."""
    k = np.zeros((length, length))
    c = (length - 1) / 2.0
    for t in np.linspace(-c, c, 4 * length):
        x = int(round(c + t * np.cos(angle)))
        y = int(round(c + t * np.sin(angle)))
        k[y, x] = 1.0
    return k / k.sum()


def _motion_blur(img, rng, cfg):
    length = int(rng.choice(cfg.motion_blur_kernel))
    angle = rng.uniform(0, np.pi)
    if length <= 1:
        return img.copy()
    return ndimage.convolve(img, motion_blur_kernel(length, angle), mode="reflect")


def _contrast_scale(img, rng, cfg):
    scale = rng.uniform(*cfg.contrast_range)
    mean = img.mean()
    return (img - mean) * scale + mean


_FILTERS = {
    "additive_gaussian": _additive_gaussian,
    "random_brightness": _random_brightness,
    "additive_shade": _additive_shade,
    "salt_pepper": _salt_pepper,
    "motion_blur": _motion_blur,
    "contrast_scale": _contrast_scale,
}


def apply_filter(kind: str, img: np.ndarray, rng: np.random.Generator, cfg: NoiseConfig = NoiseConfig()) -> np.ndarray:
    """Apply one named filter; the result is clamped to [0, 1]."""
    try:
        fn = _FILTERS[kind]
    except KeyError:
        raise ValueError(f"unknown filter {kind!r}; expected one of {FILTER_ORDER}") from None
    img = np.asarray(img, dtype=np.float64)
    return np.clip(fn(img, rng, cfg), 0.0, 1.0)


def apply_pipeline(img: np.ndarray, rng: np.random.Generator, cfg: NoiseConfig = NoiseConfig()) -> np.ndarray:
    """Run every filter in order, each skipped with ``cfg.skip_probability``.

    A filter whose output variance drops below ``variance_guard_ratio`` times
    the variance of the input image is reverted.
    """
    img = np.asarray(img, dtype=np.float64)
    floor = cfg.variance_guard_ratio * img.var()
    out = img
    for kind in FILTER_ORDER:
        if rng.random() < cfg.skip_probability:
            continue
        candidate = apply_filter(kind, out, rng, cfg)
        if candidate.var() >= floor:
            out = candidate
    return out
