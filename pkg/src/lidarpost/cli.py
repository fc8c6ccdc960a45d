"""``lidarpost`` command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import augment as aug
from .anchors import AnchorSet, generate_anchors
from .config import PipelineConfig, load_config, parse_override
from .confidence import beta_sweep, format_sweep, rectify_all
from .dinms import di_nms, standard_nms
from .evaluation import MissingFramesError, UndefinedAPError, evaluate_dataset, format_report, pr_csv
from .kitti import KittiFormatError, parse_calib_file, synthetic_calib, write_predictions
from .synth import SynthConfig, SynthError, generate_scene, read_detections, simulate_detector, write_detections, write_frame
from .voxelizer import ConfigError, load_velodyne, voxelize

__all__ = ["main", "build_parser", "run_bench", "run_nms"]

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    p.add_argument("--config", metavar="PATH", default=S, help="JSON pipeline config")
    p.add_argument("--threads", type=int, metavar="N", default=S, help="worker threads (default: all cores)")
    p.add_argument("--seed", type=int, metavar="N", default=S, help="random seed (default 0)")
    p.add_argument("--print-config", action="store_true", default=S, help="print the resolved config and exit")
    p.add_argument(
        "--set", action="append", metavar="BLOCK.KEY=VALUE", default=S, dest="overrides",
        help="override one config value (repeatable)",
    )
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="lidarpost", description="LiDAR 3D detection post-processing toolkit", parents=[common])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("nms", parents=[common], help="rectify confidences and run NMS")
    p.add_argument("input", help="detections .jsonl file or directory of them")
    p.add_argument("-o", "--output", required=True, help="output file, or directory for directory input")
    p.add_argument("--method", choices=("di", "standard"), default="di")
    p.add_argument("--beta", type=float, help="confidence exponent (overrides rectify.beta)")
    p.add_argument("--format", choices=("jsonl", "kitti"), default="jsonl", help="output format")
    p.add_argument("--calib", help="calib directory for KITTI output (default: synthetic calib)")
    p.add_argument("--diagnostics", help="write per-cluster DI-NMS diagnostics (.jsonl, single-file input only)")

    p = sub.add_parser("evaluate", parents=[common], help="KITTI-style 3D AP")
    p.add_argument("--dets", required=True, help="directory of KITTI result files")
    p.add_argument("--gts", required=True, help="directory of KITTI label files")
    p.add_argument("--calib", required=True, help="directory of KITTI calib files")
    p.add_argument("--recall-points", type=int, choices=(11, 40))
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--json", help="write the report as JSON")
    p.add_argument("--pr-csv", help="write the moderate-difficulty PR curve as CSV")

    p = sub.add_parser("beta-sweep", parents=[common], help="PCC between real IoU and rectified confidence per beta")
    p.add_argument("input", help="detections .jsonl with real_iou")
    p.add_argument("--betas", default="0,1,2,3,4,5", help="comma-separated list")

    p = sub.add_parser("synth", parents=[common], help="write synthetic frames")
    p.add_argument("output", help="output root directory")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--noiseless", action="store_true", help="perfect detector with no false positives")
    p.add_argument("--no-detections", action="store_true", help="skip the simulated detector")

    p = sub.add_parser("voxelize", parents=[common], help="voxelize a .bin point cloud")
    p.add_argument("input")
    p.add_argument("-o", "--output", help="write coords/means/counts to .npz")

    p = sub.add_parser("augment", parents=[common], help="augment JSON scenes")
    p.add_argument("scenes", nargs="+", help="scene .json files")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--ops", default="filter,gt,local,global", help="ordered subset of filter,gt,local,global")
    p.add_argument("--db", help="ground-truth database directory (needed for gt)")
    p.add_argument("--build-db", action="store_true", help="build a database from the scenes into --output instead")

    p = sub.add_parser("bench", parents=[common], help="time rectify + DI-NMS")
    p.add_argument("--objects", type=int, default=100)
    p.add_argument("--duplicates", type=int, default=5)
    p.add_argument("--runs", type=int, default=5)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _resolve(args, extra: dict | None = None) -> PipelineConfig:
    overrides = {}
    for text in getattr(args, "overrides", None) or []:
        k, v = parse_override(text)
        overrides[k] = v
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    return load_config(getattr(args, "config", None), overrides)


def _threads(args) -> int:
    n = getattr(args, "threads", None)
    if n is None:
        return os.cpu_count() or 1
    if n < 1:
        raise UsageError("--threads must be at least 1")
    return n


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    """Map in order; results do not depend on the thread count."""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def _anchors(cfg: PipelineConfig) -> AnchorSet:
    return generate_anchors(cfg.anchor)


def run_nms(dets, anchors: AnchorSet, cfg: PipelineConfig, method: str = "di"):
    """Rectify then suppress. Returns (kept detections, DI-NMS result or None)."""
    rect = rectify_all(dets, cfg.rectify)
    if method == "standard":
        return standard_nms(rect, cfg.dinms.iou_thres, cfg.dinms.iou_mode), None
    res = di_nms(rect, anchors, cfg.dinms)
    return res.detections(), res


def run_bench(
    cfg: PipelineConfig | None = None, n_objects: int = 100, duplicates: int = 5, runs: int = 5, seed: int = 0
) -> dict:
    """Wall time of rectify_all + di_nms on a synthetic workload (one warm-up run excluded)."""
    if runs < 1:
        raise UsageError("--runs must be at least 1")
    cfg = cfg or PipelineConfig()
    scfg = SynthConfig(
        n_objects=(n_objects, n_objects),
        duplicates=(duplicates, duplicates),
        fp_rate=0.0,
        fov_half_angle=None,
        x_range=(1.0, 69.0),
        y_range=(-39.0, 39.0),
        points_base=0.0,
    )
    anchors = _anchors(cfg)
    dets = simulate_detector(generate_scene(scfg, seed), anchors, scfg, seed)
    run_nms(dets, anchors, cfg)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        run_nms(dets, anchors, cfg)
        times.append((time.perf_counter() - t0) * 1e3)
    return {
        "mean_ms": float(np.mean(times)),
        "p95_ms": float(np.percentile(times, 95)),
        "n_runs": runs,
        "n_boxes": len(dets),
        "runs_ms": times,
    }


def _calib_for(calib_dir, fid):
    if calib_dir is None:
        return synthetic_calib()
    path = Path(calib_dir) / f"{fid}.txt"
    if not path.exists():
        raise DataError(f"missing calib for frame {fid}: {path}")
    return parse_calib_file(path.read_text())


# ---------------------------------------------------------------------------
# commands


def cmd_nms(args, cfg: PipelineConfig) -> int:
    src = Path(args.input)
    if not src.exists():
        raise DataError(f"no such input: {src}")
    anchors = _anchors(cfg)
    out = Path(args.output)
    if src.is_dir():
        files = sorted(src.glob("*.jsonl"))
        out.mkdir(parents=True, exist_ok=True)
    else:
        files = [src]

    def one(path: Path):
        dets = read_detections(path)
        t0 = time.perf_counter()
        kept, res = run_nms(dets, anchors, cfg, args.method)
        return path, dets, kept, res, time.perf_counter() - t0

    results = _pmap(one, files, _threads(args))
    n_in = n_out = 0
    elapsed = 0.0
    for path, dets, kept, res, dt in results:
        n_in += len(dets)
        n_out += len(kept)
        elapsed += dt
        if src.is_dir():
            target = out / (path.stem + (".txt" if args.format == "kitti" else ".jsonl"))
        else:
            target = out
        if args.format == "kitti":
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(write_predictions(kept, _calib_for(args.calib, path.stem)))
        else:
            write_detections(target, kept)
        if args.diagnostics and res is not None and not src.is_dir():
            Path(args.diagnostics).write_text("".join(line + "\n" for line in res.iter_jsonl()))
    print(f"{args.method}-nms: kept {n_out} of {n_in} detections in {len(files)} file(s), {elapsed * 1e3:.3f} ms")
    return EXIT_OK


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    report = evaluate_dataset(args.dets, args.gts, args.calib, cfg.eval, threads=_threads(args))
    sys.stdout.write(format_report(report))
    if args.json:
        Path(args.json).write_text(report.to_json())
    if args.pr_csv:
        mod = report.reports.get(cfg.eval.difficulty)
        if mod is not None:
            Path(args.pr_csv).write_text(pr_csv(mod))
    return EXIT_OK


def cmd_beta_sweep(args, cfg: PipelineConfig) -> int:
    try:
        betas = [float(b) for b in args.betas.split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"--betas must be comma-separated numbers, got {args.betas!r}") from None
    if not betas or any(b < 0 for b in betas):
        raise UsageError("--betas needs nonnegative values")
    dets = read_detections(args.input)
    sys.stdout.write(format_sweep(beta_sweep(dets, betas)))
    return EXIT_OK


def cmd_synth(args, cfg: PipelineConfig) -> int:
    if args.frames < 0:
        raise UsageError("--frames must be nonnegative")
    scfg = cfg.synth
    if args.noiseless:
        scfg = dataclasses.replace(
            scfg, pos_std=0.0, dim_std=0.0, yaw_std=0.0, iou_noise=0.0, score_noise=0.0, fp_rate=0.0
        )
    base = getattr(args, "seed", None)
    base = scfg.seed if base is None else base
    anchors = None if args.no_detections else _anchors(cfg)

    def one(k: int):
        seed = base + k
        scene = generate_scene(scfg, seed)
        dets = None if anchors is None else simulate_detector(scene, anchors, scfg, seed)
        return scene, dets

    frames = _pmap(one, list(range(args.frames)), _threads(args))
    root = Path(args.output)
    root.mkdir(parents=True, exist_ok=True)
    for scene, dets in frames:
        write_frame(root, scene, dets)
    n_gt = sum(len(s.gts) for s, _ in frames)
    print(f"wrote {len(frames)} frames with {n_gt} objects to {root}")
    return EXIT_OK


def cmd_voxelize(args, cfg: PipelineConfig) -> int:
    try:
        pts = load_velodyne(args.input)
    except OSError as e:
        raise DataError(str(e)) from None
    grid = voxelize(pts.astype(np.float64), cfg.voxel)
    print(f"{len(grid)} voxels from {grid.total_points} of {len(pts)} points, grid {grid.shape}")
    if args.output:
        np.savez(args.output, coords=grid.coords, means=grid.means, counts=grid.counts)
    return EXIT_OK


def cmd_augment(args, cfg: PipelineConfig) -> int:
    scenes = [aug.load_scene(p) for p in args.scenes]
    out = Path(args.output)
    if args.build_db:
        db = aug.build_gt_database(scenes)
        aug.save_gt_database(db, out)
        print(f"database with {len(db)} objects written to {out}")
        return EXIT_OK
    ops = [o.strip() for o in args.ops.split(",") if o.strip()]
    bad = set(ops) - {"filter", "gt", "local", "global"}
    if bad:
        raise UsageError(f"unknown augmentation ops {sorted(bad)}")
    db = None
    if "gt" in ops:
        if not args.db:
            raise UsageError("the gt op needs --db")
        db = aug.load_gt_database(args.db)
    acfg = cfg.augment
    seed = getattr(args, "seed", None) or 0

    def one(item):
        k, scene = item
        for j, op in enumerate(ops):
            s = [seed, k, j]
            if op == "filter":
                scene = aug.Scene(scene.cloud, aug.filter_targets(scene.gts, acfg.filter), scene.frame_id, scene.calib)
            elif op == "gt":
                scene = aug.gt_augment(scene, db, s, acfg.max_added)
            elif op == "local":
                scene = aug.local_augment(scene, s, acfg.local)
            else:
                scene = aug.global_augment(scene, s, acfg.global_)
        return scene

    done = _pmap(one, list(enumerate(scenes)), _threads(args))
    out.mkdir(parents=True, exist_ok=True)
    for src, scene in zip(args.scenes, done):
        aug.save_scene(scene, out / Path(src).name)
    print(f"augmented {len(done)} scene(s) into {out}")
    return EXIT_OK


def cmd_bench(args, cfg: PipelineConfig) -> int:
    if args.objects < 1 or args.duplicates < 1:
        raise UsageError("--objects and --duplicates must be positive")
    res = run_bench(cfg, args.objects, args.duplicates, args.runs, getattr(args, "seed", None) or 0)
    print(json.dumps(res))
    return EXIT_OK


COMMANDS = {
    "nms": cmd_nms,
    "evaluate": cmd_evaluate,
    "beta-sweep": cmd_beta_sweep,
    "synth": cmd_synth,
    "voxelize": cmd_voxelize,
    "augment": cmd_augment,
    "bench": cmd_bench,
}


def _flag_overrides(args) -> dict:
    extra = {}
    if getattr(args, "beta", None) is not None:
        extra["rectify.beta"] = args.beta
    if getattr(args, "recall_points", None) is not None:
        extra["eval.recall_points"] = args.recall_points
    if getattr(args, "iou_threshold", None) is not None:
        extra["eval.iou_threshold"] = args.iou_threshold
    if args.command == "synth" and getattr(args, "seed", None) is not None:
        extra["synth.seed"] = args.seed
    return extra


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args, _flag_overrides(args))
        if getattr(args, "print_config", False):
            print(cfg.to_json())
            return EXIT_OK
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"lidarpost: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (
        DataError,
        KittiFormatError,
        MissingFramesError,
        UndefinedAPError,
        SynthError,
        OSError,
        ValueError,
    ) as e:
        print(f"lidarpost: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
