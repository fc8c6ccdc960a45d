"""Oriented boxes and exact rotated IoU in bird's-eye view and 3D.

Boxes live in the LiDAR frame as ``(x, y, z, w, l, h, r)``: ``(x, y, z)`` is
the geometric center, ``l`` runs along +x and ``w`` along +y when ``r == 0``,
and ``r`` is the counterclockwise yaw about +z, normalized to ``[-pi, pi)``.

BEV intersections are computed by Sutherland-Hodgman clipping of one
footprint against the other followed by the shoelace formula. The scalar
kernels are compiled with numba and shared by the NMS and target-assignment
code, which call them on packed ``(N, 7)`` float arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numba
import numpy as np

__all__ = [
    "Box3D",
    "Polygon2D",
    "normalize_angle",
    "boxes_to_array",
    "array_to_boxes",
    "corners_bev",
    "polygon_area",
    "clip_convex",
    "bev_intersection",
    "bev_iou",
    "iou_3d",
    "bev_iou_matrix",
    "iou_3d_matrix",
    "points_in_box",
    "points_in_bev",
    "rotate_z",
]

TWO_PI = 2.0 * math.pi

# A convex polygon as a (k, 2) float array of counterclockwise vertices.
Polygon2D = np.ndarray


def normalize_angle(r):
    """Wrap an angle (scalar or array) into ``[-pi, pi)``; in-range values pass through unchanged."""
    if isinstance(r, np.ndarray):
        wrapped = np.mod(r + math.pi, TWO_PI) - math.pi
        # mod can round up to exactly 2*pi for tiny negative inputs
        wrapped = np.where(wrapped >= math.pi, wrapped - TWO_PI, wrapped)
        return np.where((r >= -math.pi) & (r < math.pi), r, wrapped)
    return _wrap(float(r))


def _wrap(r):
    if -math.pi <= r < math.pi:
        return r
    out = (r + math.pi) - TWO_PI * math.floor((r + math.pi) / TWO_PI)
    out -= math.pi
    if out >= math.pi:
        out -= TWO_PI
    if out < -math.pi:
        out = -math.pi
    return out


_wrap_scalar = numba.njit(cache=True)(_wrap)


@dataclass(frozen=True, slots=True)
class Box3D:
    """Oriented 3D box in the LiDAR frame. Yaw is normalized on construction."""

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    r: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z", "w", "l", "h", "r"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"Box3D.{name} must be finite, got {v!r}")
            object.__setattr__(self, name, float(v))
        if self.w <= 0 or self.l <= 0 or self.h <= 0:
            raise ValueError(
                f"Box3D dimensions must be positive, got w={self.w}, l={self.l}, h={self.h}"
            )
        object.__setattr__(self, "r", normalize_angle(self.r))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box3D":
        if len(values) != 7:
            raise ValueError(f"expected 7 box parameters, got {len(values)}")
        return cls(*(float(v) for v in values))

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.r])

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.z, self.w, self.l, self.h, self.r]

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h

    @property
    def bev_diag(self) -> float:
        return math.hypot(self.w, self.l)

    @property
    def bev_distance(self) -> float:
        """Distance of the BEV center from the sensor origin."""
        return math.hypot(self.x, self.y)


def boxes_to_array(boxes: Iterable[Box3D]) -> np.ndarray:
    """Pack boxes into an ``(N, 7)`` float64 array."""
    rows = [(b.x, b.y, b.z, b.w, b.l, b.h, b.r) for b in boxes]
    if not rows:
        return np.zeros((0, 7))
    return np.array(rows, dtype=np.float64)


def array_to_boxes(arr: np.ndarray) -> list[Box3D]:
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 7)
    return [Box3D(*row) for row in arr.tolist()]


# ---------------------------------------------------------------------------
# compiled kernels

_MAX_VERTS = 16


@numba.njit(cache=True)
def _corners(x, y, l, w, r, out):
    c = math.cos(r)
    s = math.sin(r)
    hl = 0.5 * l
    hw = 0.5 * w
    # counterclockwise, starting at the front-left corner
    lx = (hl, -hl, -hl, hl)
    ly = (hw, hw, -hw, -hw)
    for k in range(4):
        out[k, 0] = x + c * lx[k] - s * ly[k]
        out[k, 1] = y + s * lx[k] + c * ly[k]


@numba.njit(cache=True)
def _shoelace(poly, n):
    if n < 3:
        return 0.0
    acc = 0.0
    for k in range(n):
        j = (k + 1) % n
        acc += poly[k, 0] * poly[j, 1] - poly[j, 0] * poly[k, 1]
    return 0.5 * acc


@numba.njit(cache=True)
def _clip(subject, n_subject, clipper, n_clip, out, tmp):
    """Clip a convex polygon by a convex CCW polygon. Returns vertex count in ``out``."""
    n = n_subject
    for k in range(n):
        out[k, 0] = subject[k, 0]
        out[k, 1] = subject[k, 1]
    for e in range(n_clip):
        if n == 0:
            return 0
        ax = clipper[e, 0]
        ay = clipper[e, 1]
        bx = clipper[(e + 1) % n_clip, 0]
        by = clipper[(e + 1) % n_clip, 1]
        ex = bx - ax
        ey = by - ay
        m = 0
        for k in range(n):
            px = out[k, 0]
            py = out[k, 1]
            qx = out[(k + 1) % n, 0]
            qy = out[(k + 1) % n, 1]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            p_in = dp >= 0.0
            q_in = dq >= 0.0
            if p_in:
                tmp[m, 0] = px
                tmp[m, 1] = py
                m += 1
            if p_in != q_in:
                t = dp / (dp - dq)
                tmp[m, 0] = px + t * (qx - px)
                tmp[m, 1] = py + t * (qy - py)
                m += 1
        for k in range(m):
            out[k, 0] = tmp[k, 0]
            out[k, 1] = tmp[k, 1]
        n = m
    return n


@numba.njit(cache=True)
def _bev_inter_pair(a, b):
    # circumscribed circles apart: no overlap, skip the allocations below
    reach = 0.5 * (math.sqrt(a[3] * a[3] + a[4] * a[4]) + math.sqrt(b[3] * b[3] + b[4] * b[4]))
    if abs(a[0] - b[0]) >= reach or abs(a[1] - b[1]) >= reach:
        return 0.0
    # canonical order and a shared local origin make the result exactly symmetric
    # and keep far-from-origin pairs from losing precision
    for k in range(7):
        if a[k] != b[k]:
            if a[k] > b[k]:
                a, b = b, a
            break
    ox = 0.5 * (a[0] + b[0])
    oy = 0.5 * (a[1] + b[1])
    ca = np.empty((4, 2))
    cb = np.empty((4, 2))
    _corners(a[0] - ox, a[1] - oy, a[4], a[3], a[6], ca)
    _corners(b[0] - ox, b[1] - oy, b[4], b[3], b[6], cb)
    # axis-aligned hull rejection
    if (
        min(ca[0, 0], ca[1, 0], ca[2, 0], ca[3, 0]) > max(cb[0, 0], cb[1, 0], cb[2, 0], cb[3, 0])
        or min(cb[0, 0], cb[1, 0], cb[2, 0], cb[3, 0]) > max(ca[0, 0], ca[1, 0], ca[2, 0], ca[3, 0])
        or min(ca[0, 1], ca[1, 1], ca[2, 1], ca[3, 1]) > max(cb[0, 1], cb[1, 1], cb[2, 1], cb[3, 1])
        or min(cb[0, 1], cb[1, 1], cb[2, 1], cb[3, 1]) > max(ca[0, 1], ca[1, 1], ca[2, 1], ca[3, 1])
    ):
        return 0.0
    out = np.empty((_MAX_VERTS, 2))
    tmp = np.empty((_MAX_VERTS, 2))
    n = _clip(ca, 4, cb, 4, out, tmp)
    area = _shoelace(out, n)
    return area if area > 0.0 else 0.0


@numba.njit(cache=True)
def bev_iou_pair(a, b):
    inter = _bev_inter_pair(a, b)
    if inter <= 0.0:
        return 0.0
    union = a[3] * a[4] + b[3] * b[4] - inter
    iou = inter / union
    return min(max(iou, 0.0), 1.0)


@numba.njit(cache=True)
def iou_3d_pair(a, b):
    za0 = a[2] - 0.5 * a[5]
    za1 = a[2] + 0.5 * a[5]
    zb0 = b[2] - 0.5 * b[5]
    zb1 = b[2] + 0.5 * b[5]
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    inter_bev = _bev_inter_pair(a, b)
    if inter_bev <= 0.0:
        return 0.0
    inter = inter_bev * dz
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    iou = inter / union
    return min(max(iou, 0.0), 1.0)


@numba.njit(cache=True)
def _pairwise(boxes_a, boxes_b, mode):
    n = boxes_a.shape[0]
    m = boxes_b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            if mode == 0:
                out[i, j] = bev_iou_pair(boxes_a[i], boxes_b[j])
            else:
                out[i, j] = iou_3d_pair(boxes_a[i], boxes_b[j])
    return out


# ---------------------------------------------------------------------------
# public API


def _as_row(box) -> np.ndarray:
    if isinstance(box, Box3D):
        return box.to_array()
    return np.asarray(box, dtype=np.float64).reshape(7)


def corners_bev(box: Box3D) -> Polygon2D:
    """Footprint corners, counterclockwise, shape ``(4, 2)``."""
    out = np.empty((4, 2))
    _corners(box.x, box.y, box.l, box.w, box.r, out)
    return out


def polygon_area(poly: Polygon2D) -> float:
    """Unsigned shoelace area of a simple polygon."""
    poly = np.asarray(poly, dtype=np.float64)
    return abs(float(_shoelace(poly, poly.shape[0])))


def clip_convex(subject: Polygon2D, clipper: Polygon2D) -> Polygon2D:
    """Intersection of two convex CCW polygons (may be empty, shape ``(0, 2)``)."""
    subject = np.ascontiguousarray(subject, dtype=np.float64)
    clipper = np.ascontiguousarray(clipper, dtype=np.float64)
    cap = 2 * (subject.shape[0] + clipper.shape[0]) + 2
    out = np.empty((cap, 2))
    tmp = np.empty((cap, 2))
    n = _clip(subject, subject.shape[0], clipper, clipper.shape[0], out, tmp)
    return out[:n].copy()


def bev_intersection(a: Box3D, b: Box3D) -> float:
    """Area of the footprint intersection of two boxes."""
    return float(_bev_inter_pair(_as_row(a), _as_row(b)))


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Rotated IoU of the BEV footprints; 0 when the overlap is degenerate."""
    return float(bev_iou_pair(_as_row(a), _as_row(b)))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Rotated 3D IoU: BEV intersection times z-overlap over the volume union."""
    return float(iou_3d_pair(_as_row(a), _as_row(b)))


def bev_iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise BEV IoU between two ``(N, 7)`` and ``(M, 7)`` box arrays."""
    a = np.ascontiguousarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    b = np.ascontiguousarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    return _pairwise(a, b, 0)


def iou_3d_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    b = np.ascontiguousarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    return _pairwise(a, b, 1)


def rotate_z(xy: np.ndarray, angle: float) -> np.ndarray:
    """Rotate ``(..., 2+)`` coordinates counterclockwise about the z axis."""
    xy = np.asarray(xy, dtype=np.float64)
    c, s = math.cos(angle), math.sin(angle)
    out = xy.copy()
    out[..., 0] = c * xy[..., 0] - s * xy[..., 1]
    out[..., 1] = s * xy[..., 0] + c * xy[..., 1]
    return out


def _to_local(points: np.ndarray, box: Box3D) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    local = np.empty((pts.shape[0], 3))
    dx = pts[:, 0] - box.x
    dy = pts[:, 1] - box.y
    c, s = math.cos(box.r), math.sin(box.r)
    local[:, 0] = c * dx + s * dy
    local[:, 1] = -s * dx + c * dy
    local[:, 2] = pts[:, 2] - box.z
    return local


def points_in_bev(points: np.ndarray, box: Box3D, margin: float = 1e-9) -> np.ndarray:
    """Mask of points whose (x, y) fall inside the box footprint (boundary inclusive)."""
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    local = _to_local(points, box)
    return (np.abs(local[:, 0]) <= 0.5 * box.l + margin) & (
        np.abs(local[:, 1]) <= 0.5 * box.w + margin
    )


def points_in_box(points: np.ndarray, box: Box3D, margin: float = 1e-9) -> np.ndarray:
    """Mask of points inside the oriented 3D box (boundary inclusive)."""
    if len(points) == 0:
        return np.zeros(0, dtype=bool)
    local = _to_local(points, box)
    return (
        (np.abs(local[:, 0]) <= 0.5 * box.l + margin)
        & (np.abs(local[:, 1]) <= 0.5 * box.w + margin)
        & (np.abs(local[:, 2]) <= 0.5 * box.h + margin)
    )
