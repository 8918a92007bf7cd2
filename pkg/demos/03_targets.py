"""
Where training targets come from
================================

Detect points on an image and on its warp, match them by position and by
descriptor, and keep only the pairs where both agree. The target is the
midpoint of each agreeing pair.

A real network supplies the heatmaps and descriptors; here we fake both
so the mechanics are easy to follow.
"""

import numpy as np

from selfkp import geometry, matching
from selfkp.geometry import Homography

rng = np.random.default_rng(2)
h = Homography.translation(6, -3) @ Homography.rotation(0.05, (63.5, 63.5))

k = rng.uniform(10, 118, (12, 2))
k_h = geometry.project_points(k, h) + rng.normal(0, 1.0, (12, 2))   # detector jitter
k_h = np.vstack([k_h, rng.uniform(0, 127, (4, 2))])                 # plus some clutter

desc = rng.normal(size=(16, 32))
desc /= np.linalg.norm(desc, axis=1, keepdims=True)
d_h = desc.copy()
_, kept = geometry.filter_in_bounds(geometry.project_points(k, h), 128, 128)
d_proj = desc[kept]

t = matching.estimate_targets(k, k_h, d_proj, d_h, h, (128, 128), theta_dist=4.0)
print(f"{len(kept)} of {len(k)} points stay in view, {len(t)} pairs accepted")
print("geometric distances:", np.round(t.geometric.dist, 2))
print("first target in I:", np.round(t.k_prime[0], 2), " in I_h:", np.round(t.k_prime_h[0], 2))
