"""Side-by-side match visualisations written as PNG files."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .evaluation import EvalConfig, match_and_precision


def draw_matches(img_a, img_b, k_a, k_b, matches) -> Image.Image:
    """Both images side by side; keypoints in yellow, correct matches green, wrong red."""
    a = (np.clip(img_a, 0, 1) * 255).astype(np.uint8)
    b = (np.clip(img_b, 0, 1) * 255).astype(np.uint8)
    h = max(a.shape[0], b.shape[0])
    canvas = np.zeros((h, a.shape[1] + b.shape[1]), dtype=np.uint8)
    canvas[: a.shape[0], : a.shape[1]] = a
    canvas[: b.shape[0], a.shape[1] :] = b
    im = Image.fromarray(canvas).convert("RGB")
    draw = ImageDraw.Draw(im)
    off = a.shape[1]
    for x, y in k_a:
        draw.ellipse([x - 2, y - 2, x + 2, y + 2], outline=(255, 220, 0))
    for x, y in k_b:
        draw.ellipse([x + off - 2, y - 2, x + off + 2, y + 2], outline=(255, 220, 0))
    for i, j, ok in zip(matches.idx_src, matches.idx_dst, matches.correct):
        (xa, ya), (xb, yb) = k_a[i], k_b[j]
        draw.line([xa, ya, xb + off, yb], fill=(0, 200, 0) if ok else (220, 0, 0))
    return im


def plot_pairs(pairs, features_fn, config: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = EvalConfig(**config)
    for k, item in enumerate(pairs):
        pair = item() if callable(item) else item
        fa = features_fn(pair.image_a, pair.path_a)
        fb = features_fn(pair.image_b, pair.path_b)
        ab, _, _ = match_and_precision(fa.points, fa.descriptors, fb.points, fb.descriptors, pair.gt,
                                       cfg.threshold_px, cfg.desc_threshold, pair.image_a.shape, pair.image_b.shape)
        draw_matches(pair.image_a, pair.image_b, fa.points, fb.points, ab).save(out / f"{pair.name or k}.png")
