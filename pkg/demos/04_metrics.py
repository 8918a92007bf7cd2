"""
Scoring a detector
==================

Repeatability, matching precision and coverage on one synthetic pair, and
how they compare against points scattered at random.
"""

import numpy as np

from selfkp import evaluation, geometry
from selfkp.geometry import HomographyConfig

rng = np.random.default_rng(3)
size = 160
h = geometry.sample_homography(HomographyConfig().scaled(0.5), rng, size, size)

k_a = rng.uniform(0, size - 1, (80, 2))
k_b = np.clip(geometry.project_points(k_a, h) + rng.normal(0, 1.0, (80, 2)), 0, size - 1)
d = rng.normal(size=(80, 64))
d /= np.linalg.norm(d, axis=1, keepdims=True)

rep = evaluation.repeatability(k_a, k_b, h, 3.0, (size, size))
ab, ba, prec = evaluation.match_and_precision(k_a, d, k_b, d, h, 3.0, 0.8, (size, size))
cov = evaluation.coverage(k_a[ab.idx_src[ab.correct]], size, size, 25)
print(f"repeatability {rep:.3f}  precision {prec:.3f}  coverage {cov:.3f}")
print(f"harmonic mean {evaluation.harmonic_mean([rep, prec, cov]):.3f}")

noise = [evaluation.repeatability(rng.uniform(0, size - 1, (80, 2)), rng.uniform(0, size - 1, (80, 2)), h, 3.0,
                                  (size, size)) for _ in range(20)]
print(f"random points repeat at {np.mean(noise):.3f}")
