"""Detector/descriptor metrics and the pair-evaluation protocol.

Every pairwise metric is symmetrised: it is computed ``a -> b`` with the
ground-truth map and ``b -> a`` with its inverse, then averaged.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .geometry import Homography, bilinear_sample, fit_homography, in_bounds, project_points

log = logging.getLogger(__name__)

METRICS = ("repeatability", "precision", "coverage")
# row labels used by published tables for the same quantities
TABLE_LABELS = {"repeatability": "Replication", "precision": "Accuracy", "coverage": "Coverage"}


@dataclass(frozen=True)
class EvalConfig:
    threshold_px: float = 3.0
    coverage_radius: float = 25.0
    keypoint_threshold: float = 0.021
    desc_threshold: float = 0.8
    nms_radius: float = 4.0
    # equalise detector point counts by keeping the k best-scoring points
    top_k: int | None = None

    def __post_init__(self):
        if self.threshold_px <= 0 or self.coverage_radius <= 0:
            raise ValueError("threshold_px and coverage_radius must be positive")
        if not 0.0 <= self.desc_threshold <= 1.0:
            raise ValueError("desc_threshold must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Ground truth


class CorrespondenceMap:
    """Dense per-pixel ground truth: ``forward[y, x]`` is the image-b position of
    pixel (x, y) of image a, valid where ``valid`` is true. ``backward`` is the
    same for b -> a and may be omitted, in which case only the a -> b
    direction of each metric is available."""

    def __init__(self, forward, valid=None, backward=None, backward_valid=None):
        self.forward = np.asarray(forward, dtype=np.float64)
        self.valid = np.isfinite(self.forward).all(-1) if valid is None else np.asarray(valid, dtype=bool)
        self.backward = None if backward is None else np.asarray(backward, dtype=np.float64)
        if self.backward is not None and backward_valid is None:
            backward_valid = np.isfinite(self.backward).all(-1)
        self.backward_valid = backward_valid

    def inverse(self):
        if self.backward is None:
            return None
        return CorrespondenceMap(self.backward, self.backward_valid, self.forward, self.valid)


def _map_points(points, gt):
    """Project points through ``gt``; returns ``(projected, usable)``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if isinstance(gt, Homography):
        return project_points(pts, gt), np.ones(len(pts), dtype=bool)
    h, w = gt.valid.shape
    ok = in_bounds(pts, h, w)
    out = np.full((len(pts), 2), np.nan)
    if ok.any():
        fwd = np.where(np.isfinite(gt.forward), gt.forward, 0.0)
        out[ok] = bilinear_sample(fwd, pts[ok])
        # nearest-pixel validity
        r = np.rint(pts[ok]).astype(int)
        good = gt.valid[r[:, 1], r[:, 0]]
        idx = np.flatnonzero(ok)
        ok[idx[~good]] = False
    return out, ok


# ---------------------------------------------------------------------------
# Metrics


def _repeat_rate(k_a, k_b, gt, eps, shape_b):
    proj, ok = _map_points(k_a, gt)
    ok &= in_bounds(np.nan_to_num(proj, nan=-1.0), *shape_b)
    n = int(ok.sum())
    if n == 0:
        return 0.0, 0
    if len(k_b) == 0:
        return 0.0, n
    d = cdist(proj[ok], np.asarray(k_b, dtype=np.float64).reshape(-1, 2))
    return float(np.count_nonzero(d.min(axis=1) <= eps)) / n, n


def repeatability(k_a, k_b, gt, eps, shape_a, shape_b=None, return_details=False):
    """Fraction of in-view keypoints re-detected within ``eps`` px, averaged over both directions."""
    shape_b = shape_a if shape_b is None else shape_b
    ab, n_ab = _repeat_rate(k_a, k_b, gt, eps, shape_b)
    inv = gt.inverse()
    if inv is None:
        value, n_ba, ba = ab, 0, None
    else:
        ba, n_ba = _repeat_rate(k_b, k_a, inv, eps, shape_a)
        value = 0.5 * (ab + ba)
    if return_details:
        return value, {"a_to_b": ab, "b_to_a": ba, "n_a": n_ab, "n_b": n_ba, "no_points": n_ab + n_ba == 0}
    return value


@dataclass
class MatchSet:
    """Descriptor matches from one image into another."""

    idx_src: np.ndarray
    idx_dst: np.ndarray
    similarity: np.ndarray
    correct: np.ndarray

    @property
    def precision(self) -> float:
        return float(self.correct.mean()) if len(self.correct) else 0.0


def _one_way_matches(k_a, d_a, k_b, d_b, gt, eps, theta_desc, shape_b):
    empty = MatchSet(np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0, bool))
    if len(k_a) == 0 or len(k_b) == 0:
        return empty
    proj, ok = _map_points(k_a, gt)
    ok &= in_bounds(np.nan_to_num(proj, nan=-1.0), *shape_b)
    sim = np.asarray(d_a, dtype=np.float64) @ np.asarray(d_b, dtype=np.float64).T
    nn = sim.argmax(axis=1)
    best = sim[np.arange(len(k_a)), nn]
    src = np.flatnonzero(ok & (best >= theta_desc))
    if src.size == 0:
        return empty
    dst = nn[src]
    err = np.linalg.norm(proj[src] - np.asarray(k_b, dtype=np.float64)[dst], axis=1)
    return MatchSet(src, dst, best[src], err <= eps)


def match_and_precision(k_a, d_a, k_b, d_b, gt, eps, theta_desc, shape_a, shape_b=None):
    """Nearest-neighbour descriptor matches above ``theta_desc`` and their precision.

    Only source points whose ground-truth projection lands inside the other
    image are matched. Returns ``(matches_ab, matches_ba, precision)``; a
    direction without matches contributes precision 0.
    """
    shape_b = shape_a if shape_b is None else shape_b
    ab = _one_way_matches(k_a, d_a, k_b, d_b, gt, eps, theta_desc, shape_b)
    inv = gt.inverse()
    if inv is None:
        return ab, None, ab.precision
    ba = _one_way_matches(k_b, d_b, k_a, d_a, inv, eps, theta_desc, shape_a)
    return ab, ba, 0.5 * (ab.precision + ba.precision)


def covered_pixels(points, height, width, radius, mask=None) -> np.ndarray:
    """Boolean map of pixel centres within ``radius`` (inclusive) of any point."""
    cov = np.zeros((height, width), dtype=bool)
    r = float(radius)
    for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2):
        x0, x1 = max(int(np.ceil(x - r)), 0), min(int(np.floor(x + r)), width - 1)
        y0, y1 = max(int(np.ceil(y - r)), 0), min(int(np.floor(y + r)), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        yy, xx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        cov[y0 : y1 + 1, x0 : x1 + 1] |= (xx - x) ** 2 + (yy - y) ** 2 <= r * r
    if mask is not None:
        cov &= np.asarray(mask, dtype=bool)
    return cov


def coverage(points, height, width, radius, mask=None) -> float:
    """Share of pixels (inside ``mask`` if given) covered by correctly matched points."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    cov = covered_pixels(points, height, width, radius, mask)
    total = height * width if mask is None else int(np.count_nonzero(mask))
    return float(cov.sum()) / total if total else 0.0


def harmonic_mean(values) -> float:
    """``n / sum(1 / v)``; 0 when any value is 0."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("harmonic mean of an empty list")
    if any(v < 0 for v in vals):
        raise ValueError("metrics must be nonnegative")
    if any(v == 0 for v in vals):
        return 0.0
    return len(vals) / sum(1.0 / v for v in vals)


# ---------------------------------------------------------------------------
# Pairs


@dataclass
class EvalPair:
    image_a: np.ndarray
    image_b: np.ndarray
    gt: object
    name: str = ""
    split: str = "all"
    mask_a: np.ndarray | None = None
    mask_b: np.ndarray | None = None
    path_a: str | None = None
    path_b: str | None = None


@dataclass
class Features:
    points: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray

    def restrict(self, mask=None, top_k=None) -> Features:
        keep = np.arange(len(self.points))
        if mask is not None and len(keep):
            r = np.rint(self.points).astype(int)
            keep = keep[np.asarray(mask, dtype=bool)[r[:, 1], r[:, 0]]]
        if top_k is not None:
            keep = keep[np.argsort(-self.scores[keep], kind="stable")[:top_k]]
        return Features(self.points[keep], self.scores[keep], self.descriptors[keep])


def evaluate_pair(fa: Features, fb: Features, pair: EvalPair, cfg: EvalConfig) -> dict:
    """All metrics for one pair; keys follow :data:`METRICS` plus the two harmonic means."""
    fa = fa.restrict(pair.mask_a, cfg.top_k)
    fb = fb.restrict(pair.mask_b, cfg.top_k)
    shape_a, shape_b = np.shape(pair.image_a), np.shape(pair.image_b)
    rep, rep_info = repeatability(fa.points, fb.points, pair.gt, cfg.threshold_px, shape_a, shape_b,
                                  return_details=True)
    ab, ba, prec = match_and_precision(fa.points, fa.descriptors, fb.points, fb.descriptors, pair.gt,
                                       cfg.threshold_px, cfg.desc_threshold, shape_a, shape_b)
    good_a = ab.idx_src[ab.correct]
    good_b = ab.idx_dst[ab.correct]
    if ba is not None:
        good_a = np.union1d(good_a, ba.idx_dst[ba.correct])
        good_b = np.union1d(good_b, ba.idx_src[ba.correct])
    cov_a = coverage(fa.points[np.unique(good_a)], *shape_a, cfg.coverage_radius, pair.mask_a)
    cov_b = coverage(fb.points[np.unique(good_b)], *shape_b, cfg.coverage_radius, pair.mask_b)
    n_matches = len(ab.correct) + (0 if ba is None else len(ba.correct))
    out = {
        "repeatability": rep,
        "precision": prec,
        "coverage": 0.5 * (cov_a + cov_b),
        "n_points_a": len(fa.points),
        "n_points_b": len(fb.points),
        "n_matches": n_matches,
        "no_matches": n_matches == 0,
        "no_points_in_view": rep_info["no_points"],
        "one_way": ba is None,
    }
    out["harmonic_mean"] = harmonic_mean([out[m] for m in METRICS])
    out["harmonic_mean_rp"] = harmonic_mean([rep, prec])
    return out


@dataclass
class EvalReport:
    config: dict
    splits: dict = field(default_factory=dict)
    overall: dict = field(default_factory=dict)
    pairs: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default) + "\n"

    def table(self) -> str:
        """Human-readable table; one row per split and metric, then harmonic means."""
        eps = self.config["threshold_px"]
        lines = [f"threshold {eps:g} px, coverage radius {self.config['coverage_radius']:g} px, "
                 f"desc threshold {self.config['desc_threshold']:g}"]
        for split in sorted(self.splits):
            for m in METRICS:
                label = f"{split.capitalize()} {TABLE_LABELS[m]}"
                lines.append(f"{label:<28}{self.splits[split][m]:.4f}")
        lines.append(f"{'Harmonic mean':<28}{self.overall['harmonic_mean']:.4f}")
        lines.append(f"{'Harmonic mean (rep/prec)':<28}{self.overall['harmonic_mean_rp']:.4f}")
        return "\n".join(lines) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def aggregate(per_pair: list[dict], cfg: EvalConfig) -> EvalReport:
    """Mean metrics per split; the overall harmonic mean spans every split metric."""
    report = EvalReport(config=asdict(cfg), pairs=per_pair)
    splits = sorted({p["split"] for p in per_pair})
    for s in splits:
        rows = [p for p in per_pair if p["split"] == s]
        report.splits[s] = {m: float(np.mean([r[m] for r in rows])) for m in METRICS}
        report.splits[s]["n_pairs"] = len(rows)
    if per_pair:
        split_vals = [report.splits[s][m] for s in splits for m in METRICS]
        rp_vals = [report.splits[s][m] for s in splits for m in ("repeatability", "precision")]
        report.overall = {m: float(np.mean([p[m] for p in per_pair])) for m in METRICS}
        report.overall["harmonic_mean"] = harmonic_mean(split_vals)
        report.overall["harmonic_mean_rp"] = harmonic_mean(rp_vals)
    return report


def evaluate_dataset(pairs, features_fn, cfg: EvalConfig) -> EvalReport:
    """Evaluate ``pairs`` (EvalPair or loader callables) with ``features_fn(image, path) -> Features``.

    A pair that fails to load or evaluate is skipped and listed in the report.
    """
    per_pair, skipped = [], []
    for k, item in enumerate(pairs):
        try:
            pair = item() if callable(item) else item
            fa = features_fn(pair.image_a, pair.path_a)
            fb = features_fn(pair.image_b, pair.path_b)
            res = evaluate_pair(fa, fb, pair, cfg)
        except Exception as exc:  # noqa: BLE001 - any broken pair is reported, not fatal
            name = getattr(item, "name", "") or str(k)
            log.warning("skipping pair %s: %s", name, exc)
            skipped.append({"pair": name, "reason": str(exc)})
            continue
        res["name"] = pair.name or str(k)
        res["split"] = pair.split
        per_pair.append(res)
    report = aggregate(per_pair, cfg)
    report.skipped = skipped
    return report


def combined_table(reports: list[EvalReport]) -> str:
    """Side-by-side table with one column per threshold, rows as in published tables."""
    if not reports:
        return ""
    splits = sorted(reports[0].splits)
    head = f"{'':<28}" + "".join(f"{r.config['threshold_px']:>8g} px" for r in reports)
    lines = [head]
    for m in METRICS:
        for s in splits:
            row = f"{s.capitalize() + ' ' + TABLE_LABELS[m]:<28}"
            row += "".join(f"{r.splits.get(s, {}).get(m, float('nan')):>11.4f}" for r in reports)
            lines.append(row)
    lines.append(f"{'Harmonic mean':<28}" + "".join(f"{r.overall.get('harmonic_mean', 0):>11.4f}" for r in reports))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Manifests: one pair per line, ``image_a image_b gt_type gt_path [split]``


GT_TYPES = ("homography", "identity", "points", "map")


@dataclass(frozen=True)
class ManifestEntry:
    image_a: Path
    image_b: Path
    gt_type: str
    gt_path: Path | None
    split: str = "all"

    @property
    def name(self) -> str:
        return f"{self.image_a.stem}-{self.image_b.stem}"


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    entries = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 3:
            raise ValueError(f"{path}:{n}: expected 'image_a image_b gt_type [gt_path] [split]'")
        gt_type = parts[2]
        if gt_type not in GT_TYPES:
            raise ValueError(f"{path}:{n}: unknown gt type {gt_type!r}")
        rest = parts[3:]
        gt_path = None
        if gt_type != "identity":
            if not rest:
                raise ValueError(f"{path}:{n}: gt type {gt_type} needs a gt path")
            gt_path, rest = base / rest[0], rest[1:]
        split = rest[0] if rest else "all"
        entries.append(ManifestEntry(base / parts[0], base / parts[1], gt_type, gt_path, split))
    return entries


def load_ground_truth(entry: ManifestEntry):
    if entry.gt_type == "identity":
        return Homography.identity()
    if entry.gt_path is None or not entry.gt_path.exists():
        raise FileNotFoundError(f"missing ground truth {entry.gt_path}")
    if entry.gt_type == "homography":
        from .geometry import read_homographies

        return read_homographies(entry.gt_path)[0]
    if entry.gt_type == "points":
        # FIRE-style control points: ``xa ya xb yb`` per line
        pts = np.loadtxt(entry.gt_path, ndmin=2)
        return fit_homography(pts[:, :2], pts[:, 2:4])
    data = np.load(entry.gt_path)
    if isinstance(data, np.lib.npyio.NpzFile):
        return CorrespondenceMap(data["forward"], backward=data["backward"] if "backward" in data else None)
    return CorrespondenceMap(data)
