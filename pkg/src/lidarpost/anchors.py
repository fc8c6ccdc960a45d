"""Dense BEV anchors, target assignment and box residual coding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Box3D, bev_iou_matrix, boxes_to_array, normalize_angle
from .voxelizer import ConfigError, VoxelConfig, bev_shape

__all__ = [
    "AnchorConfig",
    "AnchorSet",
    "TargetAssignment",
    "POSITIVE",
    "NEGATIVE",
    "IGNORED",
    "generate_anchors",
    "assign_targets",
    "encode_box",
    "decode_box",
    "encode_boxes",
    "decode_boxes",
    "direction_target",
]

POSITIVE = 1
NEGATIVE = 0
IGNORED = -1


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor grid and matching thresholds.

    JSON block schema (all keys optional)::

        {"dims": [w, l, h], "orientations": [rad, ...], "origin": [x0, y0],
         "extent": [ex, ey], "stride": [sx, sy], "z_center": z,
         "pos_threshold": 0.6, "neg_threshold": 0.45}
    """

    dims: tuple[float, float, float] = (1.6, 3.9, 1.56)
    orientations: tuple[float, ...] = (0.0, math.pi / 2)
    origin: tuple[float, float] = (0.0, -40.0)
    extent: tuple[float, float] = (70.4, 80.0)
    stride: tuple[float, float] = (0.4, 0.4)
    z_center: float = -1.0
    pos_threshold: float = 0.6
    neg_threshold: float = 0.45

    def __post_init__(self):
        for name in ("dims", "orientations", "origin", "extent", "stride"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ConfigError(f"anchor dims must be three positive values, got {self.dims}")
        if not self.orientations:
            raise ConfigError("at least one anchor orientation is required")
        if not 0.0 <= self.neg_threshold < self.pos_threshold <= 1.0:
            raise ConfigError(
                f"need 0 <= neg_threshold < pos_threshold <= 1, got "
                f"{self.neg_threshold}, {self.pos_threshold}"
            )
        if min(self.stride) <= 0 or min(self.extent) <= 0:
            raise ConfigError("stride and extent must be positive")
        self.grid_size  # validates integrality

    @property
    def grid_size(self) -> tuple[int, int]:
        out = []
        for axis, e, s in zip("xy", self.extent, self.stride):
            q = e / s
            n = round(q)
            if n < 1 or abs(q - n) > 1e-6 * max(1.0, q):
                raise ConfigError(f"{axis} extent {e} is not a multiple of stride {s}")
            out.append(int(n))
        return out[0], out[1]

    @classmethod
    def from_voxel_config(cls, vcfg: VoxelConfig, **overrides) -> "AnchorConfig":
        (x0, x1), (y0, y1), _ = vcfg.range
        bev_shape(vcfg)
        stride = (vcfg.voxel_size[0] * vcfg.bev_stride, vcfg.voxel_size[1] * vcfg.bev_stride)
        return cls(origin=(x0, y0), extent=(x1 - x0, y1 - y0), stride=stride, **overrides)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "orientations": list(self.orientations),
            "origin": list(self.origin),
            "extent": list(self.extent),
            "stride": list(self.stride),
            "z_center": self.z_center,
            "pos_threshold": self.pos_threshold,
            "neg_threshold": self.neg_threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorConfig":
        return cls(**d)


@dataclass
class AnchorSet:
    """Anchors packed as ``(ny * nx * n_orient, 7)``, row-major over (iy, ix, orientation)."""

    boxes: np.ndarray
    cfg: AnchorConfig

    def __len__(self) -> int:
        return int(self.boxes.shape[0])

    def __getitem__(self, i: int) -> Box3D:
        return Box3D(*self.boxes[i])

    @property
    def shape(self) -> tuple[int, int, int]:
        nx, ny = self.cfg.grid_size
        return ny, nx, len(self.cfg.orientations)

    def index(self, iy: int, ix: int, k: int) -> int:
        ny, nx, no = self.shape
        return (iy * nx + ix) * no + k

    def nearest(self, x: float, y: float, yaw: float = 0.0) -> int:
        """Anchor whose BEV center is nearest to (x, y); the orientation closest to ``yaw``
        (modulo pi) breaks the tie between co-located anchors."""
        ny, nx, no = self.shape
        sx, sy = self.cfg.stride
        ox, oy = self.cfg.origin
        ix = min(max(int(math.floor((x - ox) / sx)), 0), nx - 1)
        iy = min(max(int(math.floor((y - oy) / sy)), 0), ny - 1)
        diffs = [abs(normalize_angle(2.0 * (yaw - o))) for o in self.cfg.orientations]
        return self.index(iy, ix, int(np.argmin(diffs)))


def generate_anchors(cfg: AnchorConfig | None = None) -> AnchorSet:
    cfg = cfg or AnchorConfig()
    nx, ny = cfg.grid_size
    sx, sy = cfg.stride
    ox, oy = cfg.origin
    xs = ox + (np.arange(nx) + 0.5) * sx
    ys = oy + (np.arange(ny) + 0.5) * sy
    rots = np.asarray(cfg.orientations)
    no = rots.size
    yy, xx, rr = np.meshgrid(ys, xs, rots, indexing="ij")
    boxes = np.empty((ny * nx * no, 7))
    boxes[:, 0] = xx.ravel()
    boxes[:, 1] = yy.ravel()
    boxes[:, 2] = cfg.z_center
    boxes[:, 3:6] = cfg.dims
    boxes[:, 6] = normalize_angle(rr.ravel())
    return AnchorSet(boxes, cfg)


# ---------------------------------------------------------------------------
# residual coding


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Vectorized residuals for row-aligned ``(N, 7)`` anchor and gt arrays."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 7)
    if np.any(g[:, 3:6] <= 0):
        raise ValueError("ground-truth dimensions must be positive")
    diag = np.hypot(a[:, 3], a[:, 4])
    out = np.empty_like(a)
    out[:, 0] = (g[:, 0] - a[:, 0]) / diag
    out[:, 1] = (g[:, 1] - a[:, 1]) / diag
    out[:, 2] = (g[:, 2] - a[:, 2]) / a[:, 5]
    out[:, 3:6] = np.log(g[:, 3:6] / a[:, 3:6])
    out[:, 6] = g[:, 6] - a[:, 6]
    return out


def decode_boxes(anchors: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    t = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    diag = np.hypot(a[:, 3], a[:, 4])
    out = np.empty_like(a)
    out[:, 0] = a[:, 0] + t[:, 0] * diag
    out[:, 1] = a[:, 1] + t[:, 1] * diag
    out[:, 2] = a[:, 2] + t[:, 2] * a[:, 5]
    out[:, 3:6] = a[:, 3:6] * np.exp(t[:, 3:6])
    out[:, 6] = normalize_angle(a[:, 6] + t[:, 6])
    return out


def encode_box(anchor: Box3D, gt: Box3D) -> np.ndarray:
    """Seven residuals of ``gt`` relative to ``anchor`` (xy scaled by the anchor BEV diagonal)."""
    return encode_boxes(anchor.to_array(), gt.to_array())[0]


def decode_box(anchor: Box3D, residuals: Sequence[float]) -> Box3D:
    t = np.asarray(residuals, dtype=np.float64)
    if t.shape != (7,) or not np.all(np.isfinite(t)):
        raise ValueError("residuals must be seven finite values")
    return Box3D(*decode_boxes(anchor.to_array(), t)[0])


def direction_target(gt_yaw: float) -> int:
    """1 when the normalized yaw lies in [0, pi), else 0."""
    return 1 if normalize_angle(gt_yaw) >= 0.0 else 0


# ---------------------------------------------------------------------------
# target assignment


@dataclass
class TargetAssignment:
    labels: np.ndarray  # POSITIVE / NEGATIVE / IGNORED per anchor
    matched_gt: np.ndarray  # gt index for positives, -1 elsewhere
    max_iou: np.ndarray
    reg_targets: np.ndarray = field(repr=False)  # (N, 7), zeros off the positives
    dir_targets: np.ndarray = field(repr=False)  # (N,), 0 off the positives

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def num_positive(self) -> int:
        return int(np.count_nonzero(self.labels == POSITIVE))


def assign_targets(
    anchors: AnchorSet, gts: Sequence[Box3D], cfg: AnchorConfig | None = None
) -> TargetAssignment:
    """Label anchors by BEV IoU against the ground truths.

    An anchor is positive when its best IoU reaches ``pos_threshold``
    (matched to the best gt, lowest gt index on ties), negative below
    ``neg_threshold``, ignored in between. Each gt with any overlapping
    anchor also forces its best anchor positive (lowest anchor index on ties).
    Gts claim in order of their best IoU; a gt whose best anchor is already
    claimed takes its next best one.
    """
    cfg = cfg or anchors.cfg
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    reg = np.zeros((n, 7))
    dirs = np.zeros(n, dtype=np.int64)
    if len(gts) == 0:
        return TargetAssignment(labels, matched, np.zeros(n), reg, dirs)

    gt_arr = boxes_to_array(gts)
    iou = bev_iou_matrix(anchors.boxes, gt_arr)  # (n, G)
    best_gt = np.argmax(iou, axis=1)
    max_iou = iou[np.arange(n), best_gt]

    labels[max_iou >= cfg.neg_threshold] = IGNORED
    pos = max_iou >= cfg.pos_threshold
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]

    # force-match: gts claim anchors greedily, strongest overlap first, so
    # two gts sharing a best anchor each still end up with a positive
    best_per_gt = iou.max(axis=0)
    claimed: set[int] = set()
    for g in sorted(range(gt_arr.shape[0]), key=lambda g: (-best_per_gt[g], g)):
        col = iou[:, g]
        for a in np.lexsort((np.arange(n), -col)):
            if col[a] <= 0.0:
                break
            if a not in claimed:
                claimed.add(int(a))
                labels[a] = POSITIVE
                matched[a] = g
                break

    idx = np.flatnonzero(labels == POSITIVE)
    if idx.size:
        targets = gt_arr[matched[idx]]
        reg[idx] = encode_boxes(anchors.boxes[idx], targets)
        dirs[idx] = (normalize_angle(targets[:, 6]) >= 0.0).astype(np.int64)
    return TargetAssignment(labels, matched, max_iou, reg, dirs)
