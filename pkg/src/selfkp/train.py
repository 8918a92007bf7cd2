"""Self-supervised training: batch synthesis, the loss pipeline and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import geometry
from .augment import apply_pipeline
from .config import TrainConfig, dump_config
from .evaluation import EvalPair, Features, aggregate, evaluate_pair
from .geometry import Homography
from .io import list_images, load_image
from .keypoints import extract_windowed_max
from .losses import LossReport, descriptor_loss, heatmap_loss, keypoint_loss, random_pairings, total_loss
from .matching import estimate_targets
from .model import KeypointNet, extract_features, heatmap_from_logits, interpolate_descriptors, load_checkpoint, \
    save_checkpoint

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Data


class CorpusSource:
    """Unlabelled grayscale images under ``root``, cached after first read."""

    def __init__(self, root=None, files=None, min_size: int = 0):
        if files is None:
            if root is None:
                raise ValueError("need a root directory or a file list")
            files = list_images(root)
        self.files = [Path(f) for f in files]
        self.min_size = min_size
        self._cache: dict[int, np.ndarray | None] = {}
        self._warned: set[int] = set()
        if not self.files:
            raise ValueError(f"no images found under {root}")

    @classmethod
    def from_arrays(cls, images, min_size: int = 0) -> CorpusSource:
        src = cls.__new__(cls)
        src.files = [Path(f"<array {i}>") for i in range(len(images))]
        src.min_size = min_size
        src._cache = {i: np.asarray(im, dtype=np.float64) for i, im in enumerate(images)}
        src._warned = set()
        return src

    def __len__(self):
        return len(self.files)

    def get(self, i: int) -> np.ndarray | None:
        """Image ``i`` or None when unreadable or smaller than ``min_size``."""
        if i not in self._cache:
            try:
                img = load_image(self.files[i])
            except Exception as exc:  # noqa: BLE001 - corrupt files are skipped
                log.warning("skipping unreadable image %s: %s", self.files[i], exc)
                img = None
            self._cache[i] = img
        img = self._cache[i]
        if img is not None and min(img.shape) < self.min_size:
            if i not in self._warned:
                log.warning("skipping %s: smaller than crop %d", self.files[i], self.min_size)
                self._warned.add(i)
            return None
        return img

    def usable(self) -> list[int]:
        return [i for i in range(len(self)) if self.get(i) is not None]


def split_corpus(indices, val_fraction: float, seed: int):
    """Deterministic ``(train, val)`` index split."""
    idx = np.asarray(indices)
    n_val = int(math.floor(val_fraction * len(idx)))
    order = np.random.default_rng([seed, 7919]).permutation(len(idx))
    return sorted(idx[order[n_val:]].tolist()), sorted(idx[order[:n_val]].tolist())


@dataclass
class Batch:
    images: np.ndarray
    warped: np.ndarray
    homography: Homography
    source_indices: list

    def __len__(self):
        return len(self.images)


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return img[y : y + size, x : x + size]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 104729]).permutation(n)


def make_batch(corpus: CorpusSource, cfg: TrainConfig, rng: np.random.Generator, order=None, start: int = 0) -> Batch:
    """Crops, one shared homography, warps, then independent noise on each side.

    ``order`` lists corpus indices to draw from, starting at ``start`` and
    wrapping; unusable images are skipped in favour of the next candidate.
    """
    size = cfg.crop_size
    order = np.arange(len(corpus)) if order is None else np.asarray(order)
    h_src, h_dst, h = geometry.sample_pair_homographies(cfg.homography, rng, size, size)
    images, warped, used = [], [], []
    pos = start
    misses = 0
    while len(images) < cfg.batch_size:
        i = int(order[pos % len(order)])
        pos += 1
        img = corpus.get(i)
        if img is None or min(img.shape) < size:
            misses += 1
            if misses > len(order):
                raise ValueError("corpus has no image large enough for the crop size")
            continue
        crop = random_crop(img, size, rng)
        a = geometry.warp_image(crop, h_src)
        b = geometry.warp_image(crop, h_dst)
        images.append(apply_pipeline(a, rng, cfg.noise))
        warped.append(apply_pipeline(b, rng, cfg.noise))
        used.append(i)
    return Batch(np.stack(images), np.stack(warped), h, used)


def batch_for_step(corpus: CorpusSource, train_idx, cfg: TrainConfig, step: int) -> Batch:
    """The batch of global ``step`` (0-based); a pure function of (seed, step)."""
    spe = steps_per_epoch(len(train_idx), cfg)
    epoch, within = divmod(step, spe)
    order = np.asarray(train_idx)[epoch_order(len(train_idx), cfg.seed, epoch)]
    rng = np.random.default_rng([cfg.seed, step])
    return make_batch(corpus, cfg, rng, order, within * cfg.batch_size)


def steps_per_epoch(n_train: int, cfg: TrainConfig) -> int:
    if cfg.steps_per_epoch is not None:
        return cfg.steps_per_epoch
    return max(1, -(-n_train // cfg.batch_size))


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for 1-based ``epoch``: constant, then multiplicative decay."""
    if epoch <= cfg.epochs_constant:
        return cfg.learning_rate
    return cfg.learning_rate * cfg.decay_factor ** (epoch - cfg.epochs_constant)


# ---------------------------------------------------------------------------
# Loss pipeline


def build_model(cfg: TrainConfig) -> KeypointNet:
    torch.manual_seed(cfg.seed)
    m = cfg.model
    model = KeypointNet(m.backbone, m.head_width, m.descriptor_dim)
    return model.to(getattr(torch, cfg.dtype))


def make_optimizer(model: KeypointNet, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)


def compute_losses(model: KeypointNet, batch: Batch, cfg: TrainConfig, rng: np.random.Generator):
    """Forward both sides of the batch and return ``(total_loss_tensor, LossReport)``."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.concatenate([batch.images, batch.warped])[:, None], dtype=dtype)
    logits, fields = model(x)
    hm = heatmap_from_logits(logits)
    n = len(batch)
    p, p_h = hm[:n], hm[n:]
    shape = tuple(p.shape[-2:])
    h = batch.homography
    mask = geometry.valid_mask(*shape, h)
    l_hm = heatmap_loss(p, p_h, h, cfg.weights.heatmap, cfg.blur.size, cfg.blur.sigma, mask=mask)

    kp_terms, gts, wrongs, randoms = [], [], [], []
    counts = {"n_gt": 0, "n_wrong": 0, "n_random": 0, "n_targets": 0}
    for b in range(n):
        k, _ = extract_windowed_max(p[b], cfg.extraction.train_window_src)
        k_h, _ = extract_windowed_max(p_h[b], cfg.extraction.train_window_warp)
        _, kept = geometry.filter_in_bounds(geometry.project_points(k, h), *shape)
        d_proj = interpolate_descriptors(fields[b], k[kept])
        d_h = interpolate_descriptors(fields[n + b], k_h)
        targets = estimate_targets(k, k_h, d_proj.detach(), d_h.detach(), h, shape, cfg.theta_dist)
        counts["n_targets"] += len(targets)
        if len(targets):
            kp_terms.append(keypoint_loss(p[b], p_h[b], targets))
        pairings = None
        if cfg.n_random and len(k_h) >= 2 and len(kept):
            pairings = random_pairings(targets.geometric.idx, len(k_h), cfg.n_random, rng)
        accepted = targets.source_indices if cfg.gt_accepted_only else None
        l_gt, l_wrong, l_rand, c = descriptor_loss(d_proj, d_h, targets.geometric, targets.idx_desc, pairings,
                                                   accepted)
        gts.append(l_gt)
        wrongs.append(l_wrong)
        randoms.append(l_rand)
        for key in ("n_gt", "n_wrong", "n_random"):
            counts[key] += c[key]

    zero = p.new_zeros(())
    l_kp = torch.stack(kp_terms).mean() if kp_terms else zero
    l_gt, l_wrong, l_rand = (torch.stack(v).mean() for v in (gts, wrongs, randoms))
    total = total_loss(cfg.weights, l_kp, l_hm, l_gt, l_wrong, l_rand)
    report = LossReport(
        total=total.item(), keypoints=l_kp.item(), heatmaps=l_hm.item(), gt=l_gt.item(), wrong=l_wrong.item(),
        random=l_rand.item(), n_mask=int(mask.sum()), keypoints_skipped=not kp_terms, **counts,
    )
    return total, report


def train_step(model, optimizer, batch: Batch, cfg: TrainConfig, rng: np.random.Generator) -> LossReport:
    """One AdamW update on ``batch``; raises :class:`NonFiniteLoss` before stepping on NaN/inf."""
    model.train()
    optimizer.zero_grad(set_to_none=False)
    total, report = compute_losses(model, batch, cfg, rng)
    if not math.isfinite(report.total):
        raise NonFiniteLoss(f"non-finite loss: {report.as_dict()}")
    total.backward()
    optimizer.step()
    return report


# ---------------------------------------------------------------------------
# Validation


def validation_pairs(corpus: CorpusSource, val_idx, cfg: TrainConfig) -> list[EvalPair]:
    """Fixed self-warped centre crops of the held-out images."""
    pairs = []
    size = cfg.crop_size
    rng = np.random.default_rng([cfg.seed, 15485863])
    for i in val_idx:
        img = corpus.get(i)
        if img is None:
            continue
        hh, ww = img.shape
        y0, x0 = (hh - size) // 2, (ww - size) // 2
        crop = img[y0 : y0 + size, x0 : x0 + size]
        h = geometry.sample_homography(cfg.homography, rng, size, size)
        pairs.append(EvalPair(crop, geometry.warp_image(crop, h), h, name=str(corpus.files[i])))
    return pairs


def validate(model, pairs, cfg: TrainConfig) -> dict:
    model.eval()
    ex = cfg.extraction
    results = []
    for pair in pairs:
        fa = Features(*extract_features(model, pair.image_a, ex.threshold, ex.nms_radius, ex.top_k))
        fb = Features(*extract_features(model, pair.image_b, ex.threshold, ex.nms_radius, ex.top_k))
        res = evaluate_pair(fa, fb, pair, cfg.validation)
        res["split"] = pair.split
        results.append(res)
    return aggregate(results, cfg.validation).overall


# ---------------------------------------------------------------------------
# Loop


def _metrics_line(step: int, epoch: int, lr: float, report: LossReport) -> str:
    rec = {"step": step, "epoch": epoch, "lr": lr, **report.as_dict()}
    return json.dumps(rec, sort_keys=True)


def train_loop(corpus: CorpusSource, cfg: TrainConfig, out_dir, max_steps: int | None = None,
               resume: str | Path | None = None, checkpoint_every_epoch: bool = True) -> dict:
    """Run training, writing ``metrics.jsonl``, checkpoints and a config snapshot to ``out_dir``.

    ``max_steps`` caps the total number of optimizer steps (counted from step
    0, so a resumed run stops at the same place). Returns a summary dict.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    corpus.min_size = cfg.crop_size
    usable = corpus.usable()
    if not usable:
        raise ValueError("no usable training images (all unreadable or smaller than the crop)")
    train_idx, val_idx = split_corpus(usable, cfg.val_fraction, cfg.seed)
    spe = steps_per_epoch(len(train_idx), cfg)
    total_steps = spe * cfg.epochs if max_steps is None else min(max_steps, spe * cfg.epochs)
    val_pairs = validation_pairs(corpus, val_idx, cfg)

    if resume is not None:
        model, payload = load_checkpoint(resume)
        model.train()
        optimizer = make_optimizer(model, cfg)
        if "optimizer" in payload:
            optimizer.load_state_dict(payload["optimizer"])
        start = payload["step"]
        best = payload.get("extra", {}).get("best_score", -1.0)
    else:
        model = build_model(cfg)
        optimizer = make_optimizer(model, cfg)
        start, best = 0, -1.0

    metrics_path = out / "metrics.jsonl"
    mode = "a" if resume is not None else "w"
    checkpoints = []
    last = None
    with open(metrics_path, mode) as mlog:
        for step in range(start, total_steps):
            epoch = step // spe + 1
            lr = lr_at_epoch(epoch, cfg)
            for g in optimizer.param_groups:
                g["lr"] = lr
            batch = batch_for_step(corpus, train_idx, cfg, step)
            rng = np.random.default_rng([cfg.seed, step, 2])
            try:
                report = train_step(model, optimizer, batch, cfg, rng)
            except NonFiniteLoss as exc:
                dump = {"step": step, "epoch": epoch, "seed": cfg.seed, "error": str(exc)}
                (out / "diverged.json").write_text(json.dumps(dump, indent=2))
                raise
            mlog.write(_metrics_line(step, epoch, lr, report) + "\n")
            mlog.flush()
            last = report
            end_of_epoch = (step + 1) % spe == 0
            if end_of_epoch and checkpoint_every_epoch:
                score = None
                if val_pairs:
                    score = validate(model, val_pairs, cfg).get("harmonic_mean", 0.0)
                extra = {"best_score": max(best, score if score is not None else -1.0)}
                path = out / f"epoch_{epoch:03d}.pt"
                save_checkpoint(path, model, step + 1, epoch, optimizer, extra)
                checkpoints.append(path)
                if score is not None and score > best:
                    best = score
                    save_checkpoint(out / "best.pt", model, step + 1, epoch, optimizer, extra)
                model.train()
    final_step = max(start, total_steps)
    save_checkpoint(out / "last.pt", model, final_step, (final_step - 1) // spe + 1 if final_step else 0, optimizer,
                    {"best_score": best})
    return {"steps": final_step, "checkpoints": checkpoints, "best_score": best, "last_report": last,
            "model": model, "train_indices": train_idx, "val_indices": val_idx}
