"""Keypoint extraction from full-resolution heatmaps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class ExtractionConfig:
    train_window_src: int = 32
    train_window_warp: int = 16
    threshold: float = 0.021
    nms_radius: float = 4.0
    # None keeps every NMS survivor
    top_k: int | None = None
    use_nms: bool = True

    def __post_init__(self):
        if self.train_window_src < 1 or self.train_window_warp < 1:
            raise ValueError("windows must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.nms_radius < 0:
            raise ValueError("nms_radius must be nonnegative")


def _as_array(hm) -> np.ndarray:
    if isinstance(hm, torch.Tensor):
        hm = hm.detach().cpu().numpy()
    hm = np.asarray(hm, dtype=np.float64)
    if hm.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {hm.shape}")
    return hm


def extract_windowed_max(hm, window: int):
    """One point per non-overlapping ``window x window`` tile (edge tiles may be smaller).

    Returns ``(points, scores)``; tiles are visited row-major and ties inside a
    tile go to the smallest row, then column.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    hm = _as_array(hm)
    h, w = hm.shape
    ty, tx = -(-h // window), -(-w // window)
    padded = np.full((ty * window, tx * window), -np.inf)
    padded[:h, :w] = hm
    tiles = padded.reshape(ty, window, tx, window).transpose(0, 2, 1, 3).reshape(ty, tx, window * window)
    arg = tiles.argmax(axis=2)
    oy, ox = np.divmod(arg, window)
    rows = oy + np.arange(ty)[:, None] * window
    cols = ox + np.arange(tx)[None, :] * window
    pts = np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)
    return pts, hm[rows.ravel(), cols.ravel()]


def nms(points: np.ndarray, scores: np.ndarray, radius: float):
    """Greedy suppression: visit by descending score, drop points within ``radius``
    of an already kept one. Returns indices of the kept points, in visit order."""
    order = np.argsort(-scores, kind="stable")
    if radius <= 0:
        return order
    cell = float(radius)
    buckets: dict[tuple[int, int], list[int]] = {}
    kept = []
    r2 = radius * radius
    for i in order:
        x, y = points[i]
        bx, by = int(x // cell), int(y // cell)
        clash = False
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for j in buckets.get((bx + dx, by + dy), ()):
                    if (points[j, 0] - x) ** 2 + (points[j, 1] - y) ** 2 <= r2:
                        clash = True
                        break
                if clash:
                    break
            if clash:
                break
        if not clash:
            kept.append(i)
            buckets.setdefault((bx, by), []).append(i)
    return np.asarray(kept, dtype=np.int64)


def extract_inference(hm, threshold: float, nms_radius: float = 4.0, top_k: int | None = None):
    """Pixels scoring ``>= threshold``, thinned by greedy NMS, strongest first.

    ``top_k`` truncates to the k best survivors (used to equalise point
    counts between detectors).
    """
    hm = _as_array(hm)
    rows, cols = np.nonzero(hm >= threshold)
    pts = np.stack([cols, rows], axis=1).astype(np.float64)
    scores = hm[rows, cols]
    keep = nms(pts, scores, nms_radius)
    if top_k is not None:
        keep = keep[:top_k]
    return pts[keep], scores[keep]
