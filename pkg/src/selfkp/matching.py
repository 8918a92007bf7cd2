"""Nearest-neighbour matching and the consistency filter that yields keypoint targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .geometry import Homography, filter_in_bounds, in_bounds, project_points

THETA_DIST = 4.0


@dataclass(frozen=True)
class GeometricMatch:
    dist: np.ndarray
    idx: np.ndarray


@dataclass(frozen=True)
class TargetSet:
    """Accepted training targets and the matching state they came from.

    ``k_prime`` lives in the source image, ``k_prime_h`` in the warped one;
    ``source_indices`` index rows of ``k_proj`` (the in-bounds projections).
    """

    k_prime: np.ndarray
    k_prime_h: np.ndarray
    source_indices: np.ndarray
    k_proj: np.ndarray
    kept: np.ndarray
    geometric: GeometricMatch
    idx_desc: np.ndarray

    def __len__(self):
        return len(self.k_prime)


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def match_geometric(a, b) -> GeometricMatch:
    """Exact Euclidean nearest neighbour in ``b`` for every point of ``a``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(b) == 0:
        raise ValueError("cannot match against an empty point set")
    if len(a) == 0:
        return GeometricMatch(np.zeros(0), np.zeros(0, dtype=np.int64))
    d = cdist(a, b)
    idx = d.argmin(axis=1)
    return GeometricMatch(d[np.arange(len(a)), idx], idx)


def descriptor_similarity(da, db) -> np.ndarray:
    return np.asarray(_np(da), dtype=np.float64) @ np.asarray(_np(db), dtype=np.float64).T


def match_descriptors(da, db) -> np.ndarray:
    """Row-wise argmax of cosine similarity (rows assumed unit norm)."""
    db = _np(db)
    if len(db) == 0:
        raise ValueError("cannot match against an empty descriptor set")
    da = _np(da)
    if len(da) == 0:
        return np.zeros(0, dtype=np.int64)
    return descriptor_similarity(da, db).argmax(axis=1)


def estimate_targets(k, k_h, d_proj, d_h, h: Homography, shape, theta_dist: float = THETA_DIST) -> TargetSet:
    """Targets from points that agree under coordinate and descriptor matching.

    ``d_proj`` must hold descriptors (from the source image) of the points of
    ``k`` that stay inside the warped image, in the order of ``k``.
    """
    height, width = shape
    k = np.asarray(k, dtype=np.float64).reshape(-1, 2)
    k_h = np.asarray(k_h, dtype=np.float64).reshape(-1, 2)
    k_proj, kept = filter_in_bounds(project_points(k, h), height, width)
    d_proj = _np(d_proj)
    if len(d_proj) != len(kept):
        raise ValueError(f"d_proj has {len(d_proj)} rows but {len(kept)} points project in bounds")
    empty = np.zeros((0, 2))
    if len(kept) == 0 or len(k_h) == 0:
        return TargetSet(empty, empty, np.zeros(0, dtype=np.int64), k_proj, kept,
                         GeometricMatch(np.zeros(0), np.zeros(0, dtype=np.int64)), np.zeros(0, dtype=np.int64))
    gm = match_geometric(k_proj, k_h)
    idx_desc = match_descriptors(d_proj, d_h)
    accepted = np.flatnonzero((gm.idx == idx_desc) & (gm.dist < theta_dist))
    targets_h = 0.5 * (k_proj[accepted] + k_h[gm.idx[accepted]])
    targets = project_points(targets_h, h.inverse())
    # back-projections that leave the source image are dropped with their partner
    ok = in_bounds(targets, height, width)
    return TargetSet(targets[ok], targets_h[ok], accepted[ok], k_proj, kept, gm, idx_desc)


def format_matches(rows) -> str:
    """Match interchange text: ``i j similarity dist_geom accepted`` per line."""
    return "".join(f"{i} {j} {s:.9g} {d:.9g} {int(bool(a))}\n" for i, j, s, d, a in rows)


def parse_matches(text: str):
    rows = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        i, j, s, d, a = line.split()
        rows.append((int(i), int(j), float(s), float(d), bool(int(a))))
    return rows
