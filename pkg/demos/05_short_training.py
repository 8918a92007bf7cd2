"""
A few training steps
====================

Train the full-size network on scikit-image's sample pictures for a
handful of steps and watch the loss terms. Small crops keep it quick on
a laptop CPU.
"""

import dataclasses
import json
import tempfile
from pathlib import Path

import numpy as np
import skimage.color
import skimage.data

from selfkp.config import TrainConfig
from selfkp.train import CorpusSource, train_loop

names = ["astronaut", "camera", "coins", "moon", "brick", "grass", "coffee", "rocket"]
images = []
for n in names:
    im = getattr(skimage.data, n)()
    if im.ndim == 3:
        im = skimage.color.rgb2gray(im[..., :3])
    im = im.astype(float)
    images.append((im - im.min()) / (im.max() - im.min()))

cfg = TrainConfig(batch_size=4, crop_size=96, val_fraction=0.0, steps_per_epoch=10)
cfg = dataclasses.replace(cfg, homography=cfg.homography.scaled(96 / 256))

out = Path(tempfile.mkdtemp())
train_loop(CorpusSource.from_arrays(images), cfg, out, max_steps=10)

for line in (out / "metrics.jsonl").read_text().splitlines():
    r = json.loads(line)
    print(f"step {r['step']:2d}  total {r['total']:.3f}  keypoints {r['keypoints']:.3f}  "
          f"heatmaps {r['heatmaps']:.3f}  targets {r['n_targets']}")
print("checkpoints in", out)
