"""Training-data augmentation on points and ground-truth boxes jointly.

Four families: global similarity transforms, per-object rigid jitter,
ground-truth database pasting, and target filtering/relabeling. Every
function takes an explicit seed and returns a new :class:`Scene`.

Default magnitudes (global rotation +-pi/4, scale [0.95, 1.05], flip 0.5,
local yaw +-pi/9, local translation std 0.25 m) are implementation choices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box3D, bev_iou, normalize_angle, points_in_bev, points_in_box
from .kitti import Calib, Difficulty, LabeledBox
from .voxelizer import load_velodyne, make_cloud, save_velodyne

__all__ = [
    "Scene",
    "GlobalAugParams",
    "LocalAugParams",
    "FilterPolicy",
    "DbEntry",
    "GtDatabase",
    "global_augment",
    "local_augment",
    "transform_object",
    "gt_augment",
    "filter_targets",
    "build_gt_database",
    "save_gt_database",
    "load_gt_database",
    "save_scene",
    "load_scene",
]


@dataclass
class Scene:
    cloud: np.ndarray
    gts: list[LabeledBox] = field(default_factory=list)
    frame_id: str = ""
    calib: Calib | None = None

    def __post_init__(self):
        self.cloud = make_cloud(self.cloud)

    @property
    def boxes(self) -> list[Box3D]:
        return [g.box for g in self.gts]


@dataclass(frozen=True)
class GlobalAugParams:
    rotation: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    scale: tuple[float, float] = (0.95, 1.05)
    flip_prob: float = 0.5

    def __post_init__(self):
        if not (0 < self.scale[0] <= self.scale[1]):
            raise ValueError(f"scale range must be positive and ordered, got {self.scale}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")


@dataclass(frozen=True)
class LocalAugParams:
    rotation: tuple[float, float] = (-math.pi / 9, math.pi / 9)
    translation_std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        vals = (*self.rotation, *self.translation_std)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("local augmentation parameters must be finite")
        if min(self.translation_std) < 0:
            raise ValueError("translation std must be nonnegative")


@dataclass(frozen=True)
class FilterPolicy:
    drop_unknown_difficulty: bool = True
    similar_classes: Mapping[str, str] = field(default_factory=lambda: {"Van": "Car"})


def _similarity(
    box: Box3D, angle: float, scale: float, flip: bool
) -> Box3D:
    x, y, r = box.x, box.y, box.r
    if flip:
        y, r = -y, -r
    c, s = math.cos(angle), math.sin(angle)
    x, y = c * x - s * y, s * x + c * y
    return Box3D(
        x * scale, y * scale, box.z * scale, box.w * scale, box.l * scale, box.h * scale, r + angle
    )


def global_augment(
    scene: Scene, rng_seed, params: GlobalAugParams | None = None
) -> Scene:
    """Flip about the x axis (y -> -y), rotate about z, then scale uniformly."""
    params = params or GlobalAugParams()
    rng = np.random.default_rng(rng_seed)
    flip = bool(rng.random() < params.flip_prob)
    angle = float(rng.uniform(*params.rotation))
    scale = float(rng.uniform(*params.scale))

    pts = scene.cloud.copy()
    if flip:
        pts[:, 1] = -pts[:, 1]
    c, s = math.cos(angle), math.sin(angle)
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    pts[:, :3] *= scale

    gts = [replace(g, box=_similarity(g.box, angle, scale, flip)) for g in scene.gts]
    return Scene(pts, gts, scene.frame_id, scene.calib)


def _move(points: np.ndarray, box: Box3D, yaw: float, t) -> tuple[np.ndarray, Box3D]:
    c, s = math.cos(yaw), math.sin(yaw)
    out = points.copy()
    dx = points[:, 0] - box.x
    dy = points[:, 1] - box.y
    out[:, 0] = box.x + c * dx - s * dy + t[0]
    out[:, 1] = box.y + s * dx + c * dy + t[1]
    out[:, 2] = points[:, 2] + t[2]
    moved = Box3D(box.x + t[0], box.y + t[1], box.z + t[2], box.w, box.l, box.h, box.r + yaw)
    return out, moved


def _collides(box: Box3D, others: Iterable[Box3D]) -> bool:
    return any(bev_iou(box, o) > 0.0 for o in others)


def transform_object(
    scene: Scene, index: int, yaw: float, translation: Sequence[float], check_collision: bool = True
) -> tuple[Scene, bool]:
    """Rotate one object (box and interior points) about its center and translate it.

    Returns the new scene and whether the move was applied; a move that
    would overlap another box in BEV is rejected and leaves the scene as is.
    """
    box = scene.gts[index].box
    mask = points_in_box(scene.cloud, box)
    moved_pts, moved_box = _move(scene.cloud[mask], box, yaw, translation)
    others = [g.box for k, g in enumerate(scene.gts) if k != index]
    if check_collision and _collides(moved_box, others):
        return scene, False
    cloud = scene.cloud.copy()
    cloud[mask] = moved_pts
    gts = list(scene.gts)
    gts[index] = replace(gts[index], box=moved_box)
    return Scene(cloud, gts, scene.frame_id, scene.calib), True


def local_augment(scene: Scene, rng_seed, params: LocalAugParams | None = None) -> Scene:
    """Independent random yaw and translation per object, rejecting collisions."""
    params = params or LocalAugParams()
    rng = np.random.default_rng(rng_seed)
    n = len(scene.gts)
    yaws = rng.uniform(*params.rotation, size=n) if n else np.zeros(0)
    shifts = rng.normal(0.0, 1.0, size=(n, 3)) * np.asarray(params.translation_std)

    cloud = scene.cloud.copy()
    boxes = [g.box for g in scene.gts]
    masks = [points_in_box(scene.cloud, b) for b in boxes]
    taken = np.zeros(len(cloud), dtype=bool)
    for k in range(n):
        if yaws[k] == 0.0 and not shifts[k].any():
            continue
        mask = masks[k] & ~taken
        moved_pts, moved_box = _move(cloud[mask], boxes[k], float(yaws[k]), shifts[k])
        if _collides(moved_box, boxes[:k] + boxes[k + 1 :]):
            continue
        cloud[mask] = moved_pts
        taken |= mask
        boxes[k] = moved_box
    gts = [replace(g, box=b) for g, b in zip(scene.gts, boxes)]
    return Scene(cloud, gts, scene.frame_id, scene.calib)


# ---------------------------------------------------------------------------
# ground-truth database


@dataclass
class DbEntry:
    box: Box3D
    points: np.ndarray
    name: str
    frame_id: str = ""
    difficulty: Difficulty = Difficulty.EASY

    def __post_init__(self):
        self.points = make_cloud(self.points)
        if not np.all(points_in_bev(self.points, self.box, margin=1e-4)):
            raise ValueError(f"database entry {self.name}/{self.frame_id} has points outside its box")


@dataclass
class GtDatabase:
    entries: dict[str, list[DbEntry]] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def add(self, entry: DbEntry) -> None:
        self.entries.setdefault(entry.name, []).append(entry)


def build_gt_database(scenes: Iterable[Scene]) -> GtDatabase:
    """Crop every gt's interior points into a database keyed by class name."""
    db = GtDatabase()
    for scene in scenes:
        for g in scene.gts:
            pts = scene.cloud[points_in_box(scene.cloud, g.box)]
            db.add(DbEntry(g.box, pts, g.name, scene.frame_id, g.difficulty))
    return db


def save_gt_database(db: GtDatabase, root) -> Path:
    """Write ``<root>/<class>/<frame>_<k>.bin`` point files plus ``<root>/index.json``."""
    root = Path(root)
    index = []
    for name in sorted(db.entries):
        for k, e in enumerate(db.entries[name]):
            rel = f"{name}/{e.frame_id or 'frame'}_{k}.bin"
            save_velodyne(root / rel, e.points)
            index.append(
                {
                    "name": name,
                    "box": e.box.to_list(),
                    "frame_id": e.frame_id,
                    "difficulty": e.difficulty.label,
                    "path": rel,
                    "num_points": int(len(e.points)),
                }
            )
    root.mkdir(parents=True, exist_ok=True)
    (root / "index.json").write_text(json.dumps(index, indent=1))
    return root / "index.json"


def load_gt_database(root) -> GtDatabase:
    root = Path(root)
    db = GtDatabase()
    for item in json.loads((root / "index.json").read_text()):
        pts = load_velodyne(root / item["path"]).astype(np.float64)
        db.add(
            DbEntry(
                Box3D.from_array(item["box"]),
                pts,
                item["name"],
                item.get("frame_id", ""),
                Difficulty.parse(item.get("difficulty", "easy")),
            )
        )
    return db


def gt_augment(
    scene: Scene, db: GtDatabase, rng_seed, max_added: Mapping[str, int] | None = None
) -> Scene:
    """Paste up to ``max_added[name]`` sampled database objects per class.

    Samples overlapping an existing or already pasted box in BEV are
    skipped. Scene points inside a pasted footprint are removed before the
    sample's own points are added. Database z is kept unchanged.
    """
    max_added = {"Car": 15} if max_added is None else dict(max_added)
    rng = np.random.default_rng(rng_seed)
    placed = [g.box for g in scene.gts]
    new_gts: list[LabeledBox] = []
    new_pts: list[np.ndarray] = []
    for name in sorted(db.entries):
        pool = db.entries[name]
        n = min(int(max_added.get(name, 0)), len(pool))
        if n <= 0:
            continue
        for i in rng.choice(len(pool), size=n, replace=False):
            e = pool[int(i)]
            if _collides(e.box, placed):
                continue
            placed.append(e.box)
            new_gts.append(LabeledBox(e.box, e.name, e.difficulty))
            new_pts.append(e.points)
    if not new_gts:
        return Scene(scene.cloud.copy(), list(scene.gts), scene.frame_id, scene.calib)
    keep = np.ones(len(scene.cloud), dtype=bool)
    for g in new_gts:
        keep &= ~points_in_bev(scene.cloud, g.box)
    cloud = np.concatenate([scene.cloud[keep], *new_pts], axis=0)
    return Scene(cloud, list(scene.gts) + new_gts, scene.frame_id, scene.calib)


def filter_targets(gts: Sequence[LabeledBox], policy: FilterPolicy | None = None) -> list[LabeledBox]:
    """Drop objects outside easy/moderate/hard and relabel similar classes."""
    policy = policy or FilterPolicy()
    out = []
    for g in gts:
        if policy.drop_unknown_difficulty and g.difficulty == Difficulty.NONE:
            continue
        target = policy.similar_classes.get(g.name)
        out.append(replace(g, name=target) if target else g)
    return out


# ---------------------------------------------------------------------------
# scene files


def save_scene(scene: Scene, json_path, points_path=None) -> Path:
    """Write the JSON scene format.

    Schema: ``{"frame_id": str, "points": <path to .bin, relative to the
    JSON file>, "gts": [{"name", "box": [x, y, z, w, l, h, r], "difficulty",
    "bbox2d"?}], "calib": {"P0".."P3", "R0_rect", "Tr_velo_to_cam"} | null}``.
    """
    json_path = Path(json_path)
    if points_path is None:
        points_path = json_path.with_suffix(".bin")
    points_path = Path(points_path)
    save_velodyne(points_path, scene.cloud)
    try:
        rel = str(points_path.relative_to(json_path.parent))
    except ValueError:
        rel = str(points_path)
    doc = {
        "frame_id": scene.frame_id,
        "points": rel,
        "gts": [g.to_dict() for g in scene.gts],
        "calib": scene.calib.to_dict() if scene.calib is not None else None,
    }
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(doc, indent=1))
    return json_path


def load_scene(json_path) -> Scene:
    json_path = Path(json_path)
    doc = json.loads(json_path.read_text())
    pts_path = Path(doc["points"])
    if not pts_path.is_absolute():
        pts_path = json_path.parent / pts_path
    calib = Calib.from_dict(doc["calib"]) if doc.get("calib") else None
    return Scene(
        load_velodyne(pts_path).astype(np.float64),
        [LabeledBox.from_dict(g) for g in doc.get("gts", [])],
        doc.get("frame_id", json_path.stem),
        calib,
    )
