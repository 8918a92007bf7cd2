"""Two-headed convolutional keypoint network and its checkpoint format."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .keypoints import extract_inference

log = logging.getLogger(__name__)

CELL = 8
# channel c of a cell -> pixel offset (row c // 8, col c % 8)
CHANNEL_ORDER = "row-major-8x8"
CHECKPOINT_VERSION = 1

# VGG-style backbone; "M" is a 2x2 max-pool
BACKBONE = (64, 64, "M", 64, 64, "M", 128, 128, "M", 128, 128)
# Two convs and the three halvings; used for gradient checks
TINY_BACKBONE = (4, "M", "M", "M", 4)


class KeypointNet(nn.Module):
    """Shared backbone with a 64-channel detector head and a descriptor head."""

    def __init__(self, backbone=BACKBONE, head_width=256, descriptor_dim=256, negative_slope=0.01):
        super().__init__()
        backbone = tuple(backbone)
        if sum(1 for v in backbone if v == "M") != 3:
            raise ValueError("backbone must contain exactly three 2x2 pools (8x downsampling)")
        self.arch = {
            "backbone": list(backbone),
            "head_width": int(head_width),
            "descriptor_dim": int(descriptor_dim),
            "negative_slope": float(negative_slope),
        }
        layers = []
        ch = 1
        for v in backbone:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers += [nn.Conv2d(ch, int(v), 3, padding=1), nn.LeakyReLU(negative_slope)]
                ch = int(v)
        self.backbone = nn.Sequential(*layers)
        self.detector = nn.Sequential(
            nn.Conv2d(ch, head_width, 3, padding=1),
            nn.LeakyReLU(negative_slope),
            nn.Conv2d(head_width, CELL * CELL, 1),
        )
        self.descriptor = nn.Sequential(
            nn.Conv2d(ch, head_width, 3, padding=1),
            nn.LeakyReLU(negative_slope),
            nn.Conv2d(head_width, descriptor_dim, 1),
        )

    def forward(self, x: torch.Tensor):
        """``(B, 1, H, W)`` images -> (``(B, 64, H/8, W/8)`` logits, ``(B, D, H/8, W/8)`` descriptors)."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % CELL or w % CELL:
            raise ValueError(f"image size {h}x{w} is not divisible by {CELL}; crop or pad it first")
        feats = self.backbone(x)
        return self.detector(feats), self.descriptor(feats)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def heatmap_from_logits(logits: torch.Tensor) -> torch.Tensor:
    """Per-cell softmax over 64 channels, then depth-to-space to full resolution.

    Accepts ``(64, h, w)`` or ``(B, 64, h, w)``; returns ``(8h, 8w)`` or
    ``(B, 8h, 8w)``.
    """
    single = logits.ndim == 3
    if single:
        logits = logits.unsqueeze(0)
    if logits.shape[1] != CELL * CELL:
        raise ValueError(f"expected {CELL * CELL} channels, got {logits.shape[1]}")
    prob = torch.softmax(logits, dim=1)
    hm = F.pixel_shuffle(prob, CELL)[:, 0]
    return hm[0] if single else hm


def interpolate_descriptors(field: torch.Tensor, points) -> torch.Tensor:
    """Unit-norm descriptors at pixel ``points`` from a ``(D, h, w)`` semi-dense field."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    dim, hc, wc = field.shape
    if pts.shape[0] == 0:
        return field.new_zeros(0, dim)
    gx = np.clip((pts[:, 0] - (CELL - 1) / 2.0) / CELL, 0, wc - 1)
    gy = np.clip((pts[:, 1] - (CELL - 1) / 2.0) / CELL, 0, hc - 1)
    desc = geometry._sample_planes(field, gx, gy).T
    return F.normalize(desc, dim=1, eps=1e-12)


def to_tensor_batch(images, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.as_tensor(arr[:, None], dtype=dtype)


def center_crop_to_cell(img: np.ndarray):
    """Crop to the largest size divisible by 8; returns ``(crop, (x_off, y_off))``."""
    h, w = img.shape
    nh, nw = h - h % CELL, w - w % CELL
    y0, x0 = (h - nh) // 2, (w - nw) // 2
    return img[y0 : y0 + nh, x0 : x0 + nw], (x0, y0)


@torch.no_grad()
def extract_features(model: KeypointNet, img: np.ndarray, threshold: float, nms_radius: float = 4, top_k=None):
    """Keypoints, scores and descriptors for one image, in its own pixel frame."""
    crop, (x0, y0) = center_crop_to_cell(np.asarray(img))
    if crop.shape != np.shape(img):
        log.warning("image %s not divisible by %d; using centre crop %s", np.shape(img), CELL, crop.shape)
    dtype = next(model.parameters()).dtype
    logits, field = model(to_tensor_batch(crop, dtype))
    hm = heatmap_from_logits(logits[0])
    pts, scores = extract_inference(hm.numpy(), threshold, nms_radius, top_k=top_k)
    desc = interpolate_descriptors(field[0], pts).numpy().astype(np.float64)
    return pts + np.array([x0, y0], dtype=np.float64), scores, desc


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model: KeypointNet, step: int = 0, epoch: int = 0, optimizer=None, extra=None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "channel_order": CHANNEL_ORDER,
        "arch": model.arch,
        "step": int(step),
        "epoch": int(epoch),
        "state_dict": model.state_dict(),
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if extra:
        payload["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def read_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version is None or version > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if payload.get("channel_order") != CHANNEL_ORDER:
        raise ValueError(f"{path}: unknown channel order {payload.get('channel_order')!r}")
    return payload


def load_checkpoint(path) -> tuple[KeypointNet, dict]:
    """Rebuild the model from a checkpoint; returns ``(model, payload)``."""
    payload = read_checkpoint(path)
    arch = payload["arch"]
    model = KeypointNet(
        backbone=tuple(v if v == "M" else int(v) for v in arch["backbone"]),
        head_width=arch["head_width"],
        descriptor_dim=arch["descriptor_dim"],
        negative_slope=arch["negative_slope"],
    )
    dtype = next(iter(payload["state_dict"].values())).dtype
    model.to(dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
