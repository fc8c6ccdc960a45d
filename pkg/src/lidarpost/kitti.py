"""KITTI object-benchmark I/O: labels, calibration, submissions, difficulty."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box3D, normalize_angle

__all__ = [
    "KittiFormatError",
    "Difficulty",
    "DifficultyRule",
    "DEFAULT_DIFFICULTY_RULES",
    "LabeledBox",
    "KittiLabel",
    "Calib",
    "parse_label_file",
    "format_label",
    "parse_calib_file",
    "format_calib",
    "synthetic_calib",
    "camera_to_lidar",
    "lidar_to_camera",
    "assign_difficulty",
    "project_box_to_image",
    "write_predictions",
    "labels_to_boxes",
]


class KittiFormatError(ValueError):
    pass


class Difficulty(IntEnum):
    """Ordered so that ``a <= b`` means "qualifies at least as easily"."""

    EASY = 0
    MODERATE = 1
    HARD = 2
    NONE = 3

    @classmethod
    def parse(cls, value) -> "Difficulty":
        if isinstance(value, Difficulty):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown difficulty {value!r}") from None
        return cls(int(value))

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class DifficultyRule:
    level: Difficulty
    min_height: float
    max_occlusion: int
    max_truncation: float


# devkit thresholds; levels are checked easiest first
DEFAULT_DIFFICULTY_RULES: tuple[DifficultyRule, ...] = (
    DifficultyRule(Difficulty.EASY, 40.0, 0, 0.15),
    DifficultyRule(Difficulty.MODERATE, 25.0, 1, 0.30),
    DifficultyRule(Difficulty.HARD, 25.0, 2, 0.50),
)


@dataclass(frozen=True)
class LabeledBox:
    """A ground-truth box with its class name and difficulty level."""

    box: Box3D
    name: str
    difficulty: Difficulty = Difficulty.EASY
    bbox2d: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("class name must be nonempty")
        object.__setattr__(self, "difficulty", Difficulty.parse(self.difficulty))

    def to_dict(self) -> dict:
        d = {"name": self.name, "box": self.box.to_list(), "difficulty": self.difficulty.label}
        if self.bbox2d is not None:
            d["bbox2d"] = list(self.bbox2d)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledBox":
        bbox = d.get("bbox2d")
        return cls(
            Box3D.from_array(d["box"]),
            d["name"],
            Difficulty.parse(d.get("difficulty", "easy")),
            tuple(bbox) if bbox is not None else None,
        )


@dataclass
class KittiLabel:
    name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dims: tuple[float, float, float]  # (h, w, l)
    location: tuple[float, float, float]  # camera frame, bottom center
    rotation_y: float
    score: float | None = None

    @property
    def bbox_height(self) -> float:
        return self.bbox[3] - self.bbox[1]


def _fields_to_label(fields: list[str], lineno: int) -> KittiLabel:
    if len(fields) not in (15, 16):
        raise KittiFormatError(f"line {lineno}: expected 15 or 16 fields, got {len(fields)}")
    try:
        nums = [float(v) for v in fields[1:]]
    except ValueError as exc:
        raise KittiFormatError(f"line {lineno}: {exc}") from None
    occ = nums[1]
    if occ != int(occ):
        raise KittiFormatError(f"line {lineno}: occlusion must be an integer, got {fields[2]}")
    return KittiLabel(
        name=fields[0],
        truncation=nums[0],
        occlusion=int(occ),
        alpha=nums[2],
        bbox=tuple(nums[3:7]),
        dims=tuple(nums[7:10]),
        location=tuple(nums[10:13]),
        rotation_y=nums[13],
        score=nums[14] if len(nums) == 15 else None,
    )


def parse_label_file(text: str) -> list[KittiLabel]:
    """Parse a label or detection file. Blank lines are skipped."""
    labels = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        labels.append(_fields_to_label(fields, lineno))
    return labels


def format_label(lab: KittiLabel) -> str:
    parts = [
        lab.name,
        f"{lab.truncation:.2f}",
        str(int(lab.occlusion)),
        f"{lab.alpha:.2f}",
        *(f"{v:.2f}" for v in lab.bbox),
        *(f"{v:.2f}" for v in lab.dims),
        *(f"{v:.2f}" for v in lab.location),
        f"{lab.rotation_y:.2f}",
    ]
    if lab.score is not None:
        parts.append(f"{lab.score:.4f}")
    return " ".join(parts)


@dataclass
class Calib:
    """Per-frame KITTI calibration.

    ``P`` holds the four 3x4 camera projections, ``R0_rect`` the 3x3
    rectification and ``Tr_velo_to_cam`` the 3x4 LiDAR-to-camera transform.
    """

    P: list[np.ndarray]
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.P = [np.asarray(p, dtype=np.float64).reshape(3, 4) for p in self.P]
        self.R0_rect = np.asarray(self.R0_rect, dtype=np.float64).reshape(3, 3)
        self.Tr_velo_to_cam = np.asarray(self.Tr_velo_to_cam, dtype=np.float64).reshape(3, 4)
        m = self.velo_to_rect
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise ValueError("singular LiDAR-to-camera calibration")

    @property
    def P2(self) -> np.ndarray:
        return self.P[2]

    @property
    def velo_to_rect(self) -> np.ndarray:
        """4x4 homogeneous LiDAR to rectified-camera transform."""
        r0 = np.eye(4)
        r0[:3, :3] = self.R0_rect
        tr = np.eye(4)
        tr[:3, :4] = self.Tr_velo_to_cam
        return r0 @ tr

    @property
    def rect_to_velo(self) -> np.ndarray:
        return np.linalg.inv(self.velo_to_rect)

    def to_dict(self) -> dict:
        d = {f"P{i}": p.ravel().tolist() for i, p in enumerate(self.P)}
        d["R0_rect"] = self.R0_rect.ravel().tolist()
        d["Tr_velo_to_cam"] = self.Tr_velo_to_cam.ravel().tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Calib":
        return cls([d[f"P{i}"] for i in range(4)], d["R0_rect"], d["Tr_velo_to_cam"])


def parse_calib_file(text: str) -> Calib:
    rows: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise KittiFormatError(f"calib line {lineno}: missing ':'")
        try:
            rows[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise KittiFormatError(f"calib line {lineno}: {exc}") from None
    try:
        P = [rows[f"P{i}"] for i in range(4)]
        r0 = rows.get("R0_rect", rows.get("R_rect"))
        tr = rows.get("Tr_velo_to_cam", rows.get("Tr_velo_cam"))
        if r0 is None or tr is None:
            raise KeyError("R0_rect/Tr_velo_to_cam")
    except KeyError as exc:
        raise KittiFormatError(f"calib file missing entry {exc}") from None
    extra = {
        k: v for k, v in rows.items() if k not in {"P0", "P1", "P2", "P3", "R0_rect", "Tr_velo_to_cam"}
    }
    return Calib(P, r0, tr, extra)


def format_calib(calib: Calib) -> str:
    def row(name, m):
        return name + ": " + " ".join(f"{v:.12e}" for v in np.ravel(m))

    lines = [row(f"P{i}", p) for i, p in enumerate(calib.P)]
    lines.append(row("R0_rect", calib.R0_rect))
    lines.append(row("Tr_velo_to_cam", calib.Tr_velo_to_cam))
    for k, v in calib.extra.items():
        lines.append(row(k, v))
    return "\n".join(lines) + "\n"


def synthetic_calib(focal: float = 721.5377, cx: float = 609.5593, cy: float = 172.854) -> Calib:
    """Axis-swap calibration: camera x = -LiDAR y, camera y = -LiDAR z, camera z = LiDAR x."""
    K = np.array([[focal, 0.0, cx, 0.0], [0.0, focal, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
    tr = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
    return Calib([K, K, K, K], np.eye(3), tr)


def _transform(m: np.ndarray, p) -> np.ndarray:
    return m[:3, :3] @ np.asarray(p, dtype=np.float64) + m[:3, 3]


def camera_to_lidar(label: KittiLabel, calib: Calib) -> Box3D:
    """Convert a camera-frame label into a LiDAR-frame box.

    The bottom-center location is mapped through the inverse calibration,
    then lifted by h/2. LiDAR yaw is ``-rotation_y - pi/2``.
    """
    h, w, l = label.dims
    bottom = _transform(calib.rect_to_velo, label.location)
    return Box3D(
        bottom[0], bottom[1], bottom[2] + 0.5 * h, w, l, h, -label.rotation_y - 0.5 * math.pi
    )


def lidar_to_camera(box: Box3D, calib: Calib) -> tuple[tuple[float, float, float], tuple[float, float, float], float]:
    """Inverse of :func:`camera_to_lidar`: ``(location, dims(h, w, l), rotation_y)``."""
    loc = _transform(calib.velo_to_rect, [box.x, box.y, box.z - 0.5 * box.h])
    ry = normalize_angle(-box.r - 0.5 * math.pi)
    return (float(loc[0]), float(loc[1]), float(loc[2])), (box.h, box.w, box.l), ry


def labels_to_boxes(labels: Iterable[KittiLabel], calib: Calib) -> list[Box3D]:
    return [camera_to_lidar(lab, calib) for lab in labels]


def assign_difficulty(
    label: KittiLabel, rules: Sequence[DifficultyRule] = DEFAULT_DIFFICULTY_RULES
) -> Difficulty:
    """Easiest level whose height/occlusion/truncation limits the label satisfies."""
    height = label.bbox_height
    for rule in rules:
        if (
            height >= rule.min_height
            and label.occlusion <= rule.max_occlusion
            and label.truncation <= rule.max_truncation
        ):
            return rule.level
    return Difficulty.NONE


def project_box_to_image(box: Box3D, calib: Calib, camera: int = 2):
    """Axis-aligned pixel hull of the projected box corners, or None if behind the camera."""
    c, s = math.cos(box.r), math.sin(box.r)
    pts = []
    for sx in (0.5, -0.5):
        for sy in (0.5, -0.5):
            for sz in (0.5, -0.5):
                lx, ly = sx * box.l, sy * box.w
                pts.append((box.x + c * lx - s * ly, box.y + s * lx + c * ly, box.z + sz * box.h))
    pts = np.array(pts)
    cam = (calib.velo_to_rect[:3, :3] @ pts.T).T + calib.velo_to_rect[:3, 3]
    if np.any(cam[:, 2] <= 0.1):
        return None
    hom = np.c_[cam, np.ones(len(cam))] @ calib.P[camera].T
    uv = hom[:, :2] / hom[:, 2:3]
    return (
        float(uv[:, 0].min()),
        float(uv[:, 1].min()),
        float(uv[:, 0].max()),
        float(uv[:, 1].max()),
    )


def _alpha(location, ry) -> float:
    return normalize_angle(ry - math.atan2(location[0], location[2]))


def detection_to_label(box: Box3D, score: float, calib: Calib, name: str = "Car") -> KittiLabel:
    loc, dims, ry = lidar_to_camera(box, calib)
    bbox = project_box_to_image(box, calib)
    if bbox is None:
        bbox = (0.0, 0.0, 0.0, 0.0)
    return KittiLabel(name, 0.0, 0, _alpha(loc, ry), bbox, dims, loc, ry, float(score))


def write_predictions(dets, calib: Calib) -> str:
    """Format detections as 16-field KITTI lines (empty string for no detections).

    ``dets`` items need ``box`` and either ``confidence`` or ``score``; an
    optional ``name`` attribute defaults to ``Car``.
    """
    lines = []
    for d in dets:
        score = d.confidence if getattr(d, "confidence", None) is not None else d.score
        name = getattr(d, "name", "Car")
        lines.append(format_label(detection_to_label(d.box, score, calib, name)))
    return "".join(line + "\n" for line in lines)
