"""
Warping an image with a random homography
=========================================

Sample a perspective warp, push an image and a few points through it, and
check that the round trip lands back where it started.
"""

import numpy as np
import skimage.data

from selfkp import geometry
from selfkp.geometry import HomographyConfig

img = skimage.data.camera()[128:384, 128:384] / 255.0
rng = np.random.default_rng(0)

# default magnitudes: 14 px shift, 85 px keystone, 0.08 rad rotation
h = geometry.sample_homography(HomographyConfig(), rng, 256, 256)
print("H =\n", np.round(h.m, 4))

warped = geometry.warp_image(img, h)
mask = geometry.valid_mask(256, 256, h)
print(f"{mask.mean():.1%} of the warped frame sees the source image")

pts = rng.uniform(0, 255, (5, 2))
moved = geometry.project_points(pts, h)
back = geometry.project_points(moved, h.inverse())
print("round-trip error (px):", np.abs(back - pts).max())

# points that leave the frame are dropped, indices say which survived
kept, idx = geometry.filter_in_bounds(moved, 256, 256)
print("kept", idx.tolist())
