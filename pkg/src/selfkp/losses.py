"""Training objectives: keypoint likelihood, heatmap consistency and descriptor terms."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import geometry
from .geometry import Homography
from .matching import GeometricMatch, TargetSet

LOG_FLOOR = 1e-12
# geometric distance beyond which a wrong descriptor match counts as a negative
WRONG_MIN_DIST = 7.0


@dataclass(frozen=True)
class LossWeights:
    descriptor: float = 1.0
    detector: float = 1.0
    heatmap: float = 2000.0

    def __post_init__(self):
        if min(self.descriptor, self.detector, self.heatmap) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossReport:
    total: float
    keypoints: float
    heatmaps: float
    gt: float
    wrong: float
    random: float
    n_gt: int = 0
    n_wrong: int = 0
    n_random: int = 0
    n_mask: int = 0
    n_targets: int = 0
    keypoints_skipped: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


def keypoint_loss(p: torch.Tensor, p_h: torch.Tensor, targets: TargetSet) -> torch.Tensor:
    """Mean negative log-probability of the targets in both heatmaps (0 if no targets)."""
    if len(targets) == 0:
        return p.new_zeros(())
    lp = torch.log(geometry.bilinear_sample(p, targets.k_prime).clamp_min(LOG_FLOOR)).mean()
    lp_h = torch.log(geometry.bilinear_sample(p_h, targets.k_prime_h).clamp_min(LOG_FLOOR)).mean()
    return -0.5 * (lp + lp_h)


def heatmap_loss(p, p_h, h: Homography, weight: float = 2000.0, blur_size: int = 5, blur_sigma: float = 1.0,
                 mask=None):
    """Weighted masked MSE between the blurred warped source heatmap and the blurred target one.

    Works on ``(H, W)`` or batched ``(B, H, W)`` heatmaps that share ``h``.
    """
    if p.shape != p_h.shape:
        raise ValueError(f"heatmap shapes differ: {tuple(p.shape)} vs {tuple(p_h.shape)}")
    height, width = p.shape[-2:]
    if mask is None:
        mask = geometry.valid_mask(height, width, h)
    n_mask = int(np.count_nonzero(mask))
    if n_mask == 0:
        raise ValueError("empty validity mask; the homography maps the image out of frame")
    warped = geometry.gaussian_blur(geometry.project_heatmap(p, h), blur_size, blur_sigma)
    target = geometry.gaussian_blur(p_h, blur_size, blur_sigma)
    m = torch.as_tensor(mask, dtype=p.dtype) if isinstance(p, torch.Tensor) else np.asarray(mask, dtype=np.float64)
    sq = (warped - target) ** 2 * m
    per_image = sq.reshape(*sq.shape[:-2], -1).sum(-1) / n_mask
    return weight * per_image.mean()


def random_pairings(idx_geom, n_candidates: int, n_shuffles: int, rng: np.random.Generator) -> np.ndarray:
    """Row shuffles of the target descriptors, one per ``n_shuffles``.

    Returns an ``(n_shuffles, N)`` index array where entry ``[r, i]`` is the
    target row paired with source row ``i`` and never equals ``idx_geom[i]``.
    Requires ``n_candidates >= 2``.
    """
    idx_geom = np.asarray(idx_geom, dtype=np.int64)
    n = len(idx_geom)
    if n_candidates < 2:
        raise ValueError("need at least two target rows for a shuffle")
    out = np.empty((n_shuffles, n), dtype=np.int64)
    reps = -(-n // n_candidates)
    for r in range(n_shuffles):
        perm = np.concatenate([rng.permutation(n_candidates) for _ in range(reps)] or [[]])[:n].astype(np.int64)
        for i in np.flatnonzero(perm == idx_geom):
            if perm[i] != idx_geom[i]:
                continue
            # swap with a partner that stays valid for both rows, else shift
            partners = np.flatnonzero((perm != idx_geom[i]) & (idx_geom != perm[i]))
            if partners.size:
                j = partners[rng.integers(partners.size)]
                perm[i], perm[j] = perm[j], perm[i]
            else:
                perm[i] = (perm[i] + rng.integers(1, n_candidates)) % n_candidates
        out[r] = perm
    return out


def descriptor_loss(d_proj: torch.Tensor, d_h: torch.Tensor, gm: GeometricMatch, idx_desc, pairings=None,
                    accepted=None):
    """``(L_gt, L_wrong, L_random, counts)`` for unit-norm descriptor rows.

    * ``L_gt``: mean ``1 - cos`` of every coordinate-matched pair (or only the
      ``accepted`` rows when given);
    * ``L_wrong``: mean cosine of the coordinate-matched pair on rows where the
      descriptor match disagrees and the coordinate match is farther than
      7 px, i.e. the nearest detected point is really a different point;
    * ``L_random``: mean cosine against the shuffled rows in ``pairings``
      (see :func:`random_pairings`); 0 when ``pairings`` is None.
    """
    zero = d_proj.new_zeros(())
    counts = {"n_gt": 0, "n_wrong": 0, "n_random": 0}
    n = d_proj.shape[0]
    if n == 0 or d_h.shape[0] == 0:
        return zero, zero, zero, counts
    idx_geom = torch.from_numpy(np.asarray(gm.idx, dtype=np.int64))
    idx_desc_np = np.asarray(idx_desc, dtype=np.int64)
    g = (d_proj * d_h[idx_geom]).sum(1)

    rows = np.arange(n) if accepted is None else np.asarray(accepted, dtype=np.int64)
    l_gt = (1.0 - g[torch.from_numpy(rows)]).mean() if rows.size else zero
    counts["n_gt"] = int(rows.size)

    wrong = np.flatnonzero((np.asarray(gm.idx) != idx_desc_np) & (np.asarray(gm.dist) > WRONG_MIN_DIST))
    l_wrong = g[torch.from_numpy(wrong)].mean() if wrong.size else zero
    counts["n_wrong"] = int(wrong.size)

    if pairings is not None and np.size(pairings):
        pr = torch.from_numpy(np.asarray(pairings, dtype=np.int64))
        sims = (d_proj.unsqueeze(0) * d_h[pr]).sum(-1)
        l_random = sims.mean()
        counts["n_random"] = int(pr.numel())
    else:
        l_random = zero
    return l_gt, l_wrong, l_random, counts


def total_loss(weights: LossWeights, l_keypoints, l_heatmaps, l_gt, l_wrong, l_random):
    """Weighted sum ``w_desc * (gt + wrong + random) + w_det * (keypoints + heatmaps)``."""
    return weights.descriptor * (l_gt + l_wrong + l_random) + weights.detector * (l_keypoints + l_heatmaps)
