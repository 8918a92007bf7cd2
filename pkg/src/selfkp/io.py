"""Image loading and the keypoint interchange file."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".ppm", ".pgm", ".bmp", ".tif", ".tiff")


def load_image(path) -> np.ndarray:
    """Grayscale (luminance) image as float64 in [0, 1]."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return arr / max(arr.max(), 1.0)
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def save_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def list_images(root) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def write_keypoints(path, image_id: str, points, scores, descriptors=None) -> None:
    """Header ``count image_id``, then ``x y score [d1 ... dD]`` per keypoint."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    image_id = str(image_id).replace(" ", "_")
    lines = [f"{len(points)} {image_id}"]
    for i, (x, y) in enumerate(points):
        row = [f"{x:.6f}", f"{y:.6f}", f"{scores[i]:.9g}"]
        if descriptors is not None:
            row += [f"{v:.9g}" for v in descriptors[i]]
        lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_keypoints(path):
    """Returns ``(image_id, points, scores, descriptors or None)``."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty keypoint file")
    head = lines[0].split()
    count, image_id = int(head[0]), head[1] if len(head) > 1 else ""
    rows = [np.array(line.split(), dtype=np.float64) for line in lines[1 : 1 + count]]
    if len(rows) != count:
        raise ValueError(f"{path}: header says {count} keypoints, found {len(rows)}")
    if count == 0:
        return image_id, np.zeros((0, 2)), np.zeros(0), None
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: rows have differing lengths")
    data = np.stack(rows)
    desc = data[:, 3:] if data.shape[1] > 3 else None
    return image_id, data[:, :2], data[:, 2], desc
