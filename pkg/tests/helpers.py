"""Shared fixtures-as-functions for the loss, training and acceptance tests."""

from dataclasses import dataclass

import numpy as np
import torch
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from selfkp import geometry, losses
from selfkp.geometry import HomographyConfig
from selfkp.keypoints import extract_windowed_max
from selfkp.matching import estimate_targets
from selfkp.model import TINY_BACKBONE, KeypointNet, heatmap_from_logits, interpolate_descriptors

import oracles

TERMS = ("keypoints", "heatmaps", "gt", "wrong", "random")


def textured_image(rng, size):
    yy, xx = np.mgrid[0:size, 0:size]
    img = 0.5 + 0.25 * np.sin(xx / 4.0 + rng.uniform(0, 6)) * np.cos(yy / 3.0 + rng.uniform(0, 6))
    return np.clip(img + 0.1 * rng.random((size, size)), 0, 1)


@dataclass
class GradProblem:
    model: KeypointNet
    x: torch.Tensor
    h: geometry.Homography
    targets: object
    kept: np.ndarray
    k: np.ndarray
    k_h: np.ndarray
    pairings: np.ndarray

    def terms(self):
        logits, fields = self.model(self.x)
        hm = heatmap_from_logits(logits)
        p, p_h = hm[0], hm[1]
        d_proj = interpolate_descriptors(fields[0], self.k[self.kept])
        d_h = interpolate_descriptors(fields[1], self.k_h)
        l_gt, l_wrong, l_rand, _ = losses.descriptor_loss(d_proj, d_h, self.targets.geometric,
                                                          self.targets.idx_desc, self.pairings)
        return {
            "keypoints": losses.keypoint_loss(p, p_h, self.targets),
            "heatmaps": losses.heatmap_loss(p, p_h, self.h),
            "gt": l_gt,
            "wrong": l_wrong,
            "random": l_rand,
        }


def grad_problem(seed=0, size=64):
    """Reduced network in float64 with frozen targets, matches and shuffles.

    The discrete choices (keypoints, matches, pairings) are computed once so
    each loss term is a smooth function of the weights.
    """
    for attempt in range(50):
        rng = np.random.default_rng([seed, attempt])
        torch.manual_seed(seed * 1000 + attempt)
        model = KeypointNet(backbone=TINY_BACKBONE, head_width=8, descriptor_dim=16).double()
        img = textured_image(rng, size)
        h = geometry.sample_homography(HomographyConfig(3, 6, 0.05), rng, size, size)
        x = torch.tensor(np.stack([img, geometry.warp_image(img, h)])[:, None])
        with torch.no_grad():
            logits, fields = model(x)
            hm = heatmap_from_logits(logits)
        k, _ = extract_windowed_max(hm[0], 16)
        k_h, _ = extract_windowed_max(hm[1], 16)
        _, kept = geometry.filter_in_bounds(geometry.project_points(k, h), size, size)
        d_proj = interpolate_descriptors(fields[0], k[kept])
        d_h = interpolate_descriptors(fields[1], k_h)
        targets = estimate_targets(k, k_h, d_proj, d_h, h, (size, size), theta_dist=50.0)
        pairings = losses.random_pairings(targets.geometric.idx, len(k_h), 2, rng)
        wrong = (targets.geometric.idx != targets.idx_desc) & (targets.geometric.dist > losses.WRONG_MIN_DIST)
        if len(targets) and wrong.any():
            return GradProblem(model, x, h, targets, kept, k, k_h, pairings)
    raise RuntimeError("could not build a gradient problem with targets and wrong matches")


def gradient_agreement(problem: GradProblem, term: str, n_params=200, seed=0, tol=1e-3):
    """Share of sampled weights whose autograd and central-difference gradients agree."""
    model = problem.model
    params = list(model.parameters())
    model.zero_grad()
    problem.terms()[term].backward()
    analytic = torch.cat([torch.zeros_like(p).reshape(-1) if p.grad is None else p.grad.reshape(-1)
                          for p in params]).numpy().copy()
    base = parameters_to_vector(params).detach().numpy().copy()
    live = np.flatnonzero(analytic != 0)
    rng = np.random.default_rng(seed)
    idx = rng.choice(live, size=min(n_params, live.size), replace=False)

    def fn(vec):
        with torch.no_grad():
            vector_to_parameters(torch.from_numpy(vec), params)
            return float(problem.terms()[term])

    try:
        numeric = oracles.fd_gradient(fn, base, idx, step=1e-4)
    finally:
        with torch.no_grad():
            vector_to_parameters(torch.from_numpy(base), params)
    a = analytic[idx]
    rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.mean(rel < tol)), len(idx)


def quick_config(**overrides):
    """Small crops and a scaled-down warp so a step takes a fraction of a second."""
    from selfkp.config import TrainConfig

    base = TrainConfig()
    kw = dict(batch_size=2, crop_size=64, val_fraction=0.0, steps_per_epoch=4,
              homography=base.homography.scaled(0.25))
    kw.update(overrides)
    return TrainConfig(**kw)


def quick_config_yaml(path, **overrides):
    from selfkp.config import dump_config

    dump_config(quick_config(**overrides), path)
    return path
