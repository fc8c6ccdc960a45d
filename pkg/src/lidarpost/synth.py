"""Deterministic synthetic scenes and a noisy stand-in for a trained detector.

Scenes hold car-sized boxes on a flat ground plane, each covered with
surface points whose count decays with range. The simulated detector emits
several jittered duplicates per object (the redundancy a dense anchor grid
produces) plus a few low-score false positives away from any object. All
noise magnitudes grow linearly with BEV range.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .anchors import AnchorSet
from .augment import Scene, save_scene
from .confidence import Detection
from .geometry import Box3D, bev_iou, iou_3d
from .kitti import (
    Calib,
    KittiLabel,
    LabeledBox,
    assign_difficulty,
    detection_to_label,
    format_calib,
    format_label,
    project_box_to_image,
    synthetic_calib,
)
from .voxelizer import save_velodyne

__all__ = [
    "SynthError",
    "SynthConfig",
    "generate_scene",
    "simulate_detector",
    "gt_label",
    "write_frame",
    "write_detections",
    "read_detections",
]

IMAGE_SIZE = (1242.0, 375.0)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    """Scene and detector-noise parameters.

    Noise standard deviations apply at range 0 and grow by the factor
    ``noise_scale * (1 + range / noise_ref_distance)``. Set
    ``fixed_iou_pred`` to pin every true detection's predicted IoU.
    """

    seed: int = 0
    n_objects: tuple[int, int] = (5, 15)
    x_range: tuple[float, float] = (5.0, 65.0)
    y_range: tuple[float, float] = (-35.0, 35.0)
    fov_half_angle: float | None = 0.7  # keep objects in front of the camera
    dims_mean: tuple[float, float, float] = (1.6, 3.9, 1.56)  # w, l, h
    dims_std: tuple[float, float, float] = (0.08, 0.2, 0.08)
    ground_z: float = -1.73
    points_base: float = 600.0
    points_decay: float = 0.04  # per meter, 0 disables
    ground_points: int = 0
    pos_std: float = 0.02
    dim_std: float = 0.01
    yaw_std: float = 0.01
    iou_noise: float = 0.04
    noise_scale: float = 1.0
    noise_ref_distance: float = 30.0
    score_slope: float = 0.9
    score_noise: float = 0.05
    fixed_iou_pred: float | None = None
    duplicates: tuple[int, int] = (3, 6)
    fp_rate: float = 2.0
    fp_score: tuple[float, float] = (0.05, 0.4)
    fp_iou_pred: tuple[float, float] = (0.0, 0.5)
    max_tries: int = 2000

    def __post_init__(self):
        stds = (*self.dims_std, self.pos_std, self.dim_std, self.yaw_std, self.iou_noise, self.score_noise)
        if min(stds) < 0:
            raise ValueError("noise standard deviations must be nonnegative")
        if min(self.fp_rate, self.points_base, self.points_decay, self.noise_scale, self.ground_points) < 0:
            raise ValueError("rates and counts must be nonnegative")
        if not 0 <= self.n_objects[0] <= self.n_objects[1]:
            raise ValueError(f"bad n_objects range {self.n_objects}")
        if not 0 <= self.duplicates[0] <= self.duplicates[1]:
            raise ValueError(f"bad duplicates range {self.duplicates}")
        if self.noise_ref_distance <= 0:
            raise ValueError("noise_ref_distance must be positive")
        if self.fixed_iou_pred is not None and not 0.0 <= self.fixed_iou_pred <= 1.0:
            raise ValueError("fixed_iou_pred must lie in [0, 1]")

    @classmethod
    def noiseless(cls, **overrides) -> "SynthConfig":
        """Perfect detector: exact boxes, no false positives."""
        base = dict(
            pos_std=0.0, dim_std=0.0, yaw_std=0.0, iou_noise=0.0, score_noise=0.0, fp_rate=0.0
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _range(x: float, y: float) -> float:
    return math.hypot(x, y)


def _noise_factor(cfg: SynthConfig, dist: float) -> float:
    return cfg.noise_scale * (1.0 + dist / cfg.noise_ref_distance)


def _random_box(rng: np.random.Generator, cfg: SynthConfig) -> Box3D | None:
    for _ in range(cfg.max_tries):
        x = rng.uniform(*cfg.x_range)
        y = rng.uniform(*cfg.y_range)
        if cfg.fov_half_angle is None or abs(math.atan2(y, x)) <= cfg.fov_half_angle:
            break
    else:
        return None
    w, l, h = (max(m + s * rng.standard_normal(), 0.2 * m) for m, s in zip(cfg.dims_mean, cfg.dims_std))
    r = rng.uniform(-math.pi, math.pi)
    return Box3D(x, y, cfg.ground_z + h / 2.0, w, l, h, r)


def _surface_points(rng: np.random.Generator, box: Box3D, n: int) -> np.ndarray:
    """``n`` points on the box surface (shrunk by 0.1 %), with random intensity."""
    if n == 0:
        return np.zeros((0, 4))
    hl, hw, hh = box.l / 2, box.w / 2, box.h / 2
    areas = np.array([box.w * box.h, box.w * box.h, box.l * box.h, box.l * box.h, box.l * box.w, box.l * box.w])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 3)) * np.array([hl, hw, hh])
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    half = np.array([hl, hw, hh])
    u[np.arange(n), axis] = sign * half[axis]
    u *= 0.999
    c, s = math.cos(box.r), math.sin(box.r)
    pts = np.empty((n, 4))
    pts[:, 0] = box.x + c * u[:, 0] - s * u[:, 1]
    pts[:, 1] = box.y + s * u[:, 0] + c * u[:, 1]
    pts[:, 2] = box.z + u[:, 2]
    pts[:, 3] = rng.uniform(0.0, 1.0, size=n)
    return pts


def _truncation(raw, clipped) -> float:
    area = (raw[2] - raw[0]) * (raw[3] - raw[1])
    inner = max(clipped[2] - clipped[0], 0.0) * max(clipped[3] - clipped[1], 0.0)
    return 1.0 if area <= 0 else float(min(max(1.0 - inner / area, 0.0), 1.0))


def gt_label(box: Box3D, name: str, calib: Calib) -> KittiLabel:
    """KITTI label for a synthetic object: clipped image box, truncation from clipping, no occlusion."""
    lab = detection_to_label(box, 0.0, calib, name)
    raw = project_box_to_image(box, calib)
    if raw is None:
        return replace(lab, truncation=1.0, bbox=(0.0, 0.0, 0.0, 0.0), score=None)
    W, H = IMAGE_SIZE
    clipped = (max(raw[0], 0.0), max(raw[1], 0.0), min(raw[2], W - 1), min(raw[3], H - 1))
    return replace(lab, truncation=_truncation(raw, clipped), bbox=clipped, score=None)


def generate_scene(cfg: SynthConfig | None = None, seed: int | None = None) -> Scene:
    """Random non-overlapping cars with surface points.

    Raises:
        SynthError: the requested number of objects could not be placed
            without BEV overlap within ``cfg.max_tries`` attempts.
    """
    cfg = cfg or SynthConfig()
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0])
    calib = synthetic_calib()
    n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))

    boxes: list[Box3D] = []
    tries = 0
    while len(boxes) < n:
        tries += 1
        if tries > cfg.max_tries:
            raise SynthError(f"placed {len(boxes)} of {n} objects after {cfg.max_tries} attempts")
        b = _random_box(rng, cfg)
        if b is None:
            continue
        if any(bev_iou(b, o) > 0.0 for o in boxes):
            continue
        boxes.append(b)

    chunks, gts = [], []
    for b in boxes:
        expected = cfg.points_base * math.exp(-cfg.points_decay * _range(b.x, b.y))
        chunks.append(_surface_points(rng, b, int(rng.poisson(expected))))
        lab = gt_label(b, "Car", calib)
        gts.append(LabeledBox(b, "Car", assign_difficulty(lab), tuple(lab.bbox)))
    if cfg.ground_points:
        g = np.empty((cfg.ground_points, 4))
        g[:, 0] = rng.uniform(*cfg.x_range, size=cfg.ground_points)
        g[:, 1] = rng.uniform(*cfg.y_range, size=cfg.ground_points)
        g[:, 2] = cfg.ground_z
        g[:, 3] = rng.uniform(0.0, 1.0, size=cfg.ground_points)
        chunks.append(g)
    cloud = np.concatenate(chunks) if chunks else np.zeros((0, 4))
    return Scene(cloud, gts, f"{seed:06d}", calib)


def simulate_detector(
    scene: Scene, anchors: AnchorSet, cfg: SynthConfig | None = None, seed: int | None = None
) -> list[Detection]:
    """Noisy duplicate detections per gt plus off-object false positives.

    Each detection carries its nearest anchor and its real 3D IoU with the
    ground truth it was drawn from (0 for false positives).
    """
    cfg = cfg or SynthConfig()
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 1])
    dets: list[Detection] = []
    for g in scene.gts:
        gt = g.box
        dist = _range(gt.x, gt.y)
        f = _noise_factor(cfg, dist)
        k = int(rng.integers(cfg.duplicates[0], cfg.duplicates[1] + 1))
        for _ in range(k):
            dp = rng.standard_normal(3) * cfg.pos_std * f
            dd = rng.standard_normal(3) * cfg.dim_std * f
            dr = rng.standard_normal() * cfg.yaw_std * f
            box = Box3D(
                gt.x + dp[0],
                gt.y + dp[1],
                gt.z + dp[2],
                gt.w * math.exp(dd[0]),
                gt.l * math.exp(dd[1]),
                gt.h * math.exp(dd[2]),
                gt.r + dr,
            )
            real = iou_3d(box, gt)
            score = min(max(cfg.score_slope * real + cfg.score_noise * rng.standard_normal(), 0.0), 1.0)
            if cfg.fixed_iou_pred is not None:
                ip = cfg.fixed_iou_pred
            else:
                ip = min(max(real + cfg.iou_noise * f * rng.standard_normal(), 0.0), 1.0)
            dets.append(
                Detection(box, score, ip, anchors.nearest(box.x, box.y, box.r), real_iou=real, name=g.name)
            )

    n_fp = int(rng.poisson(cfg.fp_rate)) if cfg.fp_rate > 0 else 0
    gts = scene.boxes
    for _ in range(n_fp):
        b = None
        for _ in range(cfg.max_tries):
            b = _random_box(rng, cfg)
            if b is not None and not any(bev_iou(b, o) > 0.0 for o in gts):
                break
            b = None
        if b is None:
            continue
        score = float(rng.uniform(*cfg.fp_score))
        ip = float(rng.uniform(*cfg.fp_iou_pred))
        dets.append(Detection(b, score, ip, anchors.nearest(b.x, b.y, b.r), real_iou=0.0))

    order = rng.permutation(len(dets))
    return [dets[i] for i in order]


# ---------------------------------------------------------------------------
# files


def write_detections(path, dets: Sequence[Detection]) -> None:
    """One JSON object per line (see :meth:`Detection.to_dict`)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for d in dets:
            fh.write(json.dumps(d.to_dict()) + "\n")


def read_detections(path) -> list[Detection]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(Detection.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    return out


def write_frame(root, scene: Scene, dets: Sequence[Detection] | None = None) -> None:
    """Write a frame as KITTI ``velodyne/ label_2/ calib/`` files plus ``scenes/<id>.json``.

    Detections, when given, go to ``detections/<id>.jsonl``.
    """
    root = Path(root)
    fid = scene.frame_id
    calib = scene.calib or synthetic_calib()
    for sub in ("velodyne", "label_2", "calib", "scenes"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    save_velodyne(root / "velodyne" / f"{fid}.bin", scene.cloud)
    lines = [format_label(gt_label(g.box, g.name, calib)) + "\n" for g in scene.gts]
    (root / "label_2" / f"{fid}.txt").write_text("".join(lines))
    (root / "calib" / f"{fid}.txt").write_text(format_calib(calib))
    save_scene(scene, root / "scenes" / f"{fid}.json", root / "velodyne" / f"{fid}.bin")
    if dets is not None:
        write_detections(root / "detections" / f"{fid}.jsonl", dets)
