"""``selfkp`` command line: train, extract, match, eval, inspect-checkpoint.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, describe_defaults, load_config
from .evaluation import EvalConfig, EvalPair, Features, combined_table, evaluate_dataset, load_ground_truth, \
    read_manifest
from .geometry import project_points, read_homographies
from .io import load_image, read_keypoints, write_keypoints
from .matching import descriptor_similarity, format_matches, match_geometric

log = logging.getLogger("selfkp")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config_epilog() -> str:
    return "configuration keys (YAML, dotted = nested) and defaults:\n  " + "\n  ".join(describe_defaults())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfkp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="self-supervised training on a folder of images",
                       epilog=_config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", type=Path, help="YAML config; omitted keys take the defaults below")
    p.add_argument("--corpus", type=Path, required=True, help="directory of training images")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")

    p = sub.add_parser("extract", help="write keypoint files for images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--images", required=True, help="glob pattern of input images")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold", type=float, default=0.021, help="keypoint score threshold (default 0.021)")
    p.add_argument("--nms-radius", type=float, default=4.0)
    p.add_argument("--no-nms", action="store_true", help="keep every pixel above the threshold")
    p.add_argument("--top-k", type=int)

    p = sub.add_parser("match", help="match two keypoint files")
    p.add_argument("--features-a", type=Path, required=True)
    p.add_argument("--features-b", type=Path, required=True)
    p.add_argument("--homography", type=Path, help="ground truth a -> b; enables dist_geom and consistency")
    p.add_argument("--theta-dist", type=float, default=4.0)
    p.add_argument("--desc-threshold", type=float, default=0.8, help="used for the flag when no homography")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="evaluate a detector on a pair manifest")
    p.add_argument("--manifest", type=Path, required=True,
                   help="lines of 'image_a image_b gt_type [gt_path] [split]'")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--features-dir", type=Path, help="keypoint files named <image stem>.kp")
    p.add_argument("--threshold-px", type=float, nargs="+", default=[3.0, 5.0])
    p.add_argument("--coverage-radius", type=float, default=25.0)
    p.add_argument("--desc-threshold", type=float, default=0.8)
    p.add_argument("--keypoint-threshold", type=float, default=0.021)
    p.add_argument("--nms-radius", type=float, default=4.0)
    p.add_argument("--top-k", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--plots", action="store_true", help="write match visualisations per pair")

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    p.add_argument("checkpoint", type=Path)
    return parser


# ---------------------------------------------------------------------------


def run_train(args) -> int:
    from .train import CorpusSource, train_loop

    if not args.corpus.is_dir():
        raise UsageError(f"corpus directory not found: {args.corpus}")
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    corpus = CorpusSource(args.corpus)
    summary = train_loop(corpus, cfg, args.out, max_steps=args.max_steps, resume=args.resume)
    print(f"trained {summary['steps']} steps; outputs in {args.out}")
    return EXIT_OK


def run_extract(args) -> int:
    from .model import extract_features, load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    paths = sorted(glob.glob(args.images, recursive=True))
    if not paths:
        raise UsageError(f"no images match {args.images}")
    args.out.mkdir(parents=True, exist_ok=True)
    radius = 0.0 if args.no_nms else args.nms_radius
    for path in paths:
        img = load_image(path)
        pts, scores, desc = extract_features(model, img, args.threshold, radius, args.top_k)
        write_keypoints(args.out / (Path(path).stem + ".kp"), Path(path).stem, pts, scores, desc)
    print(f"wrote {len(paths)} keypoint files to {args.out}")
    return EXIT_OK


def run_match(args) -> int:
    _, ka, _, da = read_keypoints(args.features_a)
    _, kb, _, db = read_keypoints(args.features_b)
    if da is None or db is None:
        raise UsageError("both keypoint files need descriptors")
    rows = []
    if len(ka) and len(kb):
        sim = descriptor_similarity(da, db)
        idx_desc = sim.argmax(axis=1)
        best = sim[np.arange(len(ka)), idx_desc]
        if args.homography:
            h = read_homographies(args.homography)[0]
            gm = match_geometric(project_points(ka, h), kb)
            accepted = (gm.idx == idx_desc) & (gm.dist < args.theta_dist)
            dist = gm.dist
        else:
            dist = np.full(len(ka), np.nan)
            accepted = best >= args.desc_threshold
        rows = list(zip(range(len(ka)), idx_desc, best, dist, accepted))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(format_matches(rows))
    print(f"wrote {len(rows)} matches to {args.out}")
    return EXIT_OK


def _pair_loader(entry):
    def load():
        gt = load_ground_truth(entry)
        return EvalPair(load_image(entry.image_a), load_image(entry.image_b), gt, name=entry.name,
                        split=entry.split, path_a=str(entry.image_a), path_b=str(entry.image_b))

    load.name = entry.name
    return load


def run_eval(args) -> int:
    try:
        entries = read_manifest(args.manifest)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if not entries:
        raise UsageError(f"manifest {args.manifest} lists no pairs")

    if args.checkpoint:
        from .model import extract_features, load_checkpoint

        model, _ = load_checkpoint(args.checkpoint)

        def features(img, path):
            return Features(*extract_features(model, img, args.keypoint_threshold, args.nms_radius))
    else:
        cache = {}

        def features(img, path):
            kp = args.features_dir / (Path(path).stem + ".kp")
            if kp not in cache:
                _, pts, scores, desc = read_keypoints(kp)
                cache[kp] = Features(pts, scores, np.zeros((len(pts), 0)) if desc is None else desc)
            return cache[kp]

    args.out.mkdir(parents=True, exist_ok=True)
    reports = []
    for eps in args.threshold_px:
        cfg = EvalConfig(threshold_px=eps, coverage_radius=args.coverage_radius,
                         keypoint_threshold=args.keypoint_threshold, desc_threshold=args.desc_threshold,
                         nms_radius=args.nms_radius, top_k=args.top_k)
        report = evaluate_dataset([_pair_loader(e) for e in entries], features, cfg)
        if not report.pairs:
            print(f"all {len(entries)} pairs were skipped", file=sys.stderr)
            for s in report.skipped:
                print(f"  {s['pair']}: {s['reason']}", file=sys.stderr)
            return EXIT_RUNTIME
        tag = f"{eps:g}px"
        (args.out / f"report_{tag}.json").write_text(report.to_json())
        (args.out / f"report_{tag}.txt").write_text(report.table())
        reports.append(report)
        if report.skipped:
            print(f"skipped {len(report.skipped)} pairs: " + ", ".join(s["pair"] for s in report.skipped))
    table = combined_table(reports)
    (args.out / "table.txt").write_text(table)
    print(table, end="")
    if args.plots:
        from .plotting import plot_pairs

        plot_pairs([_pair_loader(e) for e in entries], features, reports[0].config, args.out / "plots")
    return EXIT_OK


def run_inspect(args) -> int:
    from .model import count_parameters, load_checkpoint

    model, payload = load_checkpoint(args.checkpoint)
    info = {
        "format_version": payload["format_version"],
        "channel_order": payload["channel_order"],
        "step": payload["step"],
        "epoch": payload["epoch"],
        "arch": payload["arch"],
        "parameters": count_parameters(model),
        "has_optimizer_state": "optimizer" in payload,
    }
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "train": run_train,
    "extract": run_extract,
    "match": run_match,
    "eval": run_eval,
    "inspect-checkpoint": run_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        log.debug("failure", exc_info=True)
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
