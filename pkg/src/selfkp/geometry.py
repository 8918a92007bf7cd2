"""Planar homographies, point/image projection, masks, blur and bilinear sampling.

Conventions used throughout the package:

* points are ``(N, 2)`` arrays of ``(x, y)`` in pixel units;
* pixel ``(x, y)`` is the centre of column ``x``, row ``y``, so a point is
  inside a ``height x width`` image iff ``0 <= x <= width - 1`` and
  ``0 <= y <= height - 1``;
* dense fields (images, heatmaps) are indexed ``[row, col]``.

Dense operations accept either numpy arrays or torch tensors and return the
same kind they were given. The torch path is differentiable with respect to
the field values (never the coordinates), which is what the losses need.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

DET_EPS = 1e-12
W_EPS = 1e-9
# Slack for coordinates that leave the image by floating-point noise only.
BOUNDS_SLACK = 1e-6


@dataclass(frozen=True)
class Homography:
    """Invertible 3x3 projective map, stored with ``m[2, 2] == 1``."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("homography has non-finite entries")
        if abs(m[2, 2]) < DET_EPS:
            raise ValueError("homography with m[2, 2] == 0 cannot be normalised")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= DET_EPS:
            raise ValueError("homography is singular")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> Homography:
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> Homography:
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    @classmethod
    def rotation(cls, angle: float, center=(0.0, 0.0)) -> Homography:
        """Rotation by ``angle`` radians about ``center`` (x, y)."""
        cx, cy = center
        c, s = np.cos(angle), np.sin(angle)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        t = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
        t_inv = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
        return cls(t @ r @ t_inv)

    def inverse(self) -> Homography:
        return Homography(np.linalg.inv(self.m))

    def __matmul__(self, other: Homography) -> Homography:
        # (a @ b) applies b first, then a
        return Homography(self.m @ other.m)

    def is_identity(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.abs(self.m - np.eye(3)) <= tol))


@dataclass(frozen=True)
class HomographyConfig:
    """Magnitudes of the random homography; all in pixels except rotation."""

    max_shift_px: float = 14.0
    max_perspective_px: float = 85.0
    max_rotation_rad: float = 0.08
    # warp the source crop as well; the pair is still related by one H
    warp_both: bool = False
    # fraction of each magnitude given to the source-side warp when warp_both
    warp_both_split: float = 0.5

    def __post_init__(self):
        for name in ("max_shift_px", "max_perspective_px", "max_rotation_rad"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.warp_both_split <= 1.0:
            raise ValueError("warp_both_split must lie in [0, 1]")

    def scaled(self, factor: float) -> HomographyConfig:
        """Same config with every magnitude multiplied by ``factor``."""
        return HomographyConfig(
            max_shift_px=self.max_shift_px * factor,
            max_perspective_px=self.max_perspective_px * factor,
            max_rotation_rad=self.max_rotation_rad * factor,
            warp_both=self.warp_both,
            warp_both_split=self.warp_both_split,
        )


# ---------------------------------------------------------------------------
# Points


def project_points(points, h: Homography) -> np.ndarray:
    """Map ``(N, 2)`` points through ``h`` with a perspective divide."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return np.zeros((0, 2))
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    hom = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1) @ h.m.T
    w = hom[:, 2]
    bad = np.flatnonzero(np.abs(w) < W_EPS)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"point {i} at {tuple(pts[i])} maps to the line at infinity (w={w[i]:.3g})")
    return hom[:, :2] / w[:, None]


def in_bounds(points, height: int, width: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return (pts[:, 0] >= 0) & (pts[:, 0] <= width - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= height - 1)


def filter_in_bounds(points, height: int, width: int):
    """Keep points inside the image; returns ``(kept_points, kept_indices)``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    keep = np.flatnonzero(in_bounds(pts, height, width))
    return pts[keep], keep


# ---------------------------------------------------------------------------
# Homography estimation and sampling


def _normalising_transform(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1))
    if d < DET_EPS:
        raise ValueError("degenerate configuration: points are coincident")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def fit_homography(src, dst) -> Homography:
    """Normalised DLT fit of ``dst ~ H src`` from >= 4 correspondences."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape or src.shape[0] < 4:
        raise ValueError("need at least 4 matching point pairs")
    t_src = _normalising_transform(src)
    t_dst = _normalising_transform(dst)
    a = project_points(src, Homography(t_src))
    b = project_points(dst, Homography(t_dst))
    rows = []
    for (x, y), (u, v) in zip(a, b):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, sing, vt = np.linalg.svd(np.asarray(rows))
    if src.shape[0] == 4 and sing[-2] < 1e-10 * sing[0]:
        raise ValueError("degenerate configuration: collinear points")
    hn = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(t_dst) @ hn @ t_src)


def _is_convex_same_orientation(src: np.ndarray, dst: np.ndarray) -> bool:
    def cross_signs(q):
        e = np.roll(q, -1, axis=0) - q
        nxt = np.roll(e, -1, axis=0)
        return e[:, 0] * nxt[:, 1] - e[:, 1] * nxt[:, 0]

    s, d = cross_signs(src), cross_signs(dst)
    if np.any(np.abs(d) < 1e-6 * max(1.0, np.abs(s).max())):
        return False
    return bool(np.all(np.sign(d) == np.sign(s[0])))


def sample_corner_perturbation(cfg: HomographyConfig, rng: np.random.Generator, height: int, width: int):
    """Image corners and their randomly perturbed positions, both ``(4, 2)``.

    Every corner gets an independent shift within ``max_shift_px``; then one
    side pair (left or right) and one edge pair (top or bottom) are pulled
    together or pushed apart by up to ``max_perspective_px``.
    """
    src = np.array([[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]])
    dst = src + rng.uniform(-cfg.max_shift_px, cfg.max_shift_px, size=(4, 2))
    p = cfg.max_perspective_px
    # side pair: corners (0, 3) for left, (1, 2) for right; moves along y
    top, bottom = (0, 3) if rng.random() < 0.5 else (1, 2)
    d = rng.uniform(-p, p)
    dst[top, 1] += d
    dst[bottom, 1] -= d
    # edge pair: corners (0, 1) for top, (3, 2) for bottom; moves along x
    left, right = (0, 1) if rng.random() < 0.5 else (3, 2)
    d = rng.uniform(-p, p)
    dst[left, 0] += d
    dst[right, 0] -= d
    return src, dst


MAX_SAMPLING_ATTEMPTS = 16


def sample_homography(cfg: HomographyConfig, rng: np.random.Generator, height: int, width: int) -> Homography:
    """Random homography: corner perturbation followed by rotation about the centre."""
    center = ((width - 1) / 2.0, (height - 1) / 2.0)
    for _ in range(MAX_SAMPLING_ATTEMPTS):
        src, dst = sample_corner_perturbation(cfg, rng, height, width)
        angle = rng.uniform(-cfg.max_rotation_rad, cfg.max_rotation_rad)
        if np.array_equal(src, dst):
            corners = Homography.identity()
        elif _is_convex_same_orientation(src, dst):
            try:
                corners = homography_from_corners(src, dst)
            except (ValueError, np.linalg.LinAlgError):
                continue
        else:
            continue
        if angle == 0.0:
            return corners
        return Homography.rotation(angle, center) @ corners
    raise RuntimeError(f"no valid homography after {MAX_SAMPLING_ATTEMPTS} attempts; reduce the magnitudes")


def homography_from_corners(src, dst) -> Homography:
    """Exact homography through four point pairs (8x8 linear solve)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * k], b[2 * k + 1] = u, v
    if abs(np.linalg.det(a)) < DET_EPS:
        raise ValueError("degenerate configuration: collinear corners")
    sol = np.linalg.solve(a, b)
    return Homography(np.append(sol, 1.0).reshape(3, 3))


def sample_pair_homographies(cfg: HomographyConfig, rng: np.random.Generator, height: int, width: int):
    """Warps for (source, target) crops and the single H relating them.

    Returns ``(h_src, h_dst, h)`` with ``h = h_dst @ h_src^-1``. Without
    ``warp_both`` the source warp is the identity.
    """
    if not cfg.warp_both:
        h = sample_homography(cfg, rng, height, width)
        return Homography.identity(), h, h
    h_src = sample_homography(cfg.scaled(cfg.warp_both_split), rng, height, width)
    h_dst = sample_homography(cfg.scaled(1.0 - cfg.warp_both_split), rng, height, width)
    return h_src, h_dst, h_dst @ h_src.inverse()


# ---------------------------------------------------------------------------
# Dense sampling


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64)), True


def _sample_planes(planes: torch.Tensor, xs: np.ndarray, ys: np.ndarray) -> torch.Tensor:
    """Bilinear sample ``(..., H, W)`` planes at in-range coords -> ``(..., N)``."""
    hgt, wid = planes.shape[-2:]
    x0 = np.clip(np.floor(xs), 0, max(wid - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, max(hgt - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, wid - 1)
    y1 = np.minimum(y0 + 1, hgt - 1)
    fx = torch.as_tensor(xs - x0, dtype=planes.dtype)
    fy = torch.as_tensor(ys - y0, dtype=planes.dtype)
    flat = planes.reshape(*planes.shape[:-2], hgt * wid)

    def at(yy, xx):
        return flat[..., torch.from_numpy(yy * wid + xx)]

    top = at(y0, x0) * (1 - fx) + at(y0, x1) * fx
    bot = at(y1, x0) * (1 - fx) + at(y1, x1) * fx
    return top * (1 - fy) + bot * fy


def bilinear_sample(grid, coords):
    """Sample a ``(H, W)`` or ``(H, W, C)`` field at ``(N, 2)`` (x, y) coords.

    Coordinates must lie inside ``[0, W-1] x [0, H-1]``; integer coordinates
    return grid values exactly.
    """
    g, from_numpy = _as_tensor(grid)
    if g.ndim not in (2, 3):
        raise ValueError(f"grid must be 2-D or 3-D, got shape {tuple(g.shape)}")
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    hgt, wid = g.shape[0], g.shape[1]
    xs, ys = _checked_coords(pts, hgt, wid)
    if g.ndim == 2:
        out = _sample_planes(g, xs, ys)
    else:
        out = _sample_planes(g.permute(2, 0, 1), xs, ys).T
    return out.numpy() if from_numpy else out


def _checked_coords(pts: np.ndarray, hgt: int, wid: int):
    xs, ys = pts[:, 0], pts[:, 1]
    outside = (xs < -BOUNDS_SLACK) | (xs > wid - 1 + BOUNDS_SLACK) | (ys < -BOUNDS_SLACK) | (ys > hgt - 1 + BOUNDS_SLACK)
    outside |= ~np.isfinite(xs) | ~np.isfinite(ys)
    if np.any(outside):
        i = int(np.flatnonzero(outside)[0])
        raise ValueError(f"coordinate {i} = {tuple(pts[i])} is outside the {hgt}x{wid} grid")
    return np.clip(xs, 0, wid - 1), np.clip(ys, 0, hgt - 1)


def _inverse_map(height: int, width: int, h: Homography):
    """Source coordinates of every target pixel and whether they land inside."""
    ys, xs = np.mgrid[0:height, 0:width]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = project_points(pix, h.inverse())
    return src, in_bounds(src, height, width)


def _warp(field, h: Homography):
    f, from_numpy = _as_tensor(field)
    hgt, wid = f.shape[-2:]
    if h.is_identity():
        out = f.clone()
    else:
        src, inside = _inverse_map(hgt, wid, h)
        vals = _sample_planes(f, src[inside, 0], src[inside, 1])
        out = f.new_zeros(*f.shape[:-2], hgt * wid)
        out = out.index_copy(-1, torch.from_numpy(np.flatnonzero(inside)), vals)
        out = out.reshape(f.shape)
    return out.numpy() if from_numpy else out


def warp_image(img, h: Homography):
    """Resample ``img`` (``(..., H, W)``) into the frame of ``h``; outside -> 0."""
    return _warp(img, h)


def project_heatmap(hm, h: Homography):
    """Heatmaps are warped exactly like images."""
    return _warp(hm, h)


def valid_mask(height: int, width: int, h: Homography) -> np.ndarray:
    """Boolean mask over the target grid of pixels whose preimage is inside the source."""
    if h.is_identity():
        return np.ones((height, width), dtype=bool)
    _, inside = _inverse_map(height, width, h)
    return inside.reshape(height, width)


# ---------------------------------------------------------------------------
# Blur


@dataclass(frozen=True)
class BlurConfig:
    size: int = 5
    sigma: float = 1.0


def gaussian_kernel_1d(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_blur(hm, size: int = 5, sigma: float = 1.0):
    """Separable Gaussian blur of a ``(..., H, W)`` field with reflect padding."""
    f, from_numpy = _as_tensor(hm)
    shape = f.shape
    x = f.reshape(-1, 1, shape[-2], shape[-1])
    k = torch.as_tensor(gaussian_kernel_1d(size, sigma), dtype=f.dtype)
    pad = size // 2
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, size))
    x = F.conv2d(x, k.view(1, 1, size, 1))
    out = x.reshape(shape)
    return out.numpy() if from_numpy else out


# ---------------------------------------------------------------------------
# Homography text files: 9 whitespace-separated numbers per line, row-major


def read_homographies(path) -> list[Homography]:
    """Read one homography per line (a 3x3 block over three lines is also accepted)."""
    values = np.array(Path(path).read_text().split(), dtype=np.float64)
    if values.size == 0 or values.size % 9:
        raise ValueError(f"{path}: expected a multiple of 9 numbers, got {values.size}")
    return [Homography(v.reshape(3, 3)) for v in values.reshape(-1, 9)]


def write_homographies(path, homographies) -> None:
    lines = [" ".join(f"{v:.17g}" for v in h.m.ravel()) for h in homographies]
    Path(path).write_text("\n".join(lines) + "\n")
