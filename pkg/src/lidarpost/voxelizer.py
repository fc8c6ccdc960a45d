"""Point-cloud voxelization into a sparse grid of per-voxel means."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "ConfigError",
    "VoxelConfig",
    "VoxelGrid",
    "voxelize",
    "bev_shape",
    "grid_shape",
    "load_velodyne",
    "save_velodyne",
    "make_cloud",
]


class ConfigError(ValueError):
    """Raised for an inconsistent or invalid configuration block."""


def _exact_ratio(num: float, den: float, what: str) -> int:
    q = num / den
    n = round(q)
    if n <= 0 or abs(q - n) > 1e-6 * max(1.0, abs(q)):
        raise ConfigError(f"{what}: {num} is not an integer multiple of {den}")
    return int(n)


@dataclass(frozen=True)
class VoxelConfig:
    voxel_size: tuple[float, float, float] = (0.05, 0.05, 0.1)
    range: tuple[tuple[float, float], tuple[float, float], tuple[float, float]] = (
        (0.0, 70.4),
        (-40.0, 40.0),
        (-3.0, 1.0),
    )
    bev_stride: int = 8

    def __post_init__(self):
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        object.__setattr__(
            self, "range", tuple((float(lo), float(hi)) for lo, hi in self.range)
        )
        self.validate()

    def validate(self) -> None:
        if len(self.voxel_size) != 3 or len(self.range) != 3:
            raise ConfigError("voxel_size and range need three axes")
        if any(not (v > 0 and math.isfinite(v)) for v in self.voxel_size):
            raise ConfigError(f"voxel sizes must be positive, got {self.voxel_size}")
        for axis, (lo, hi) in zip("xyz", self.range):
            if not (hi > lo):
                raise ConfigError(f"empty {axis} range [{lo}, {hi})")
        if int(self.bev_stride) != self.bev_stride or self.bev_stride < 1:
            raise ConfigError(f"bev_stride must be a positive integer, got {self.bev_stride}")
        grid_shape(self)

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.range])

    def to_dict(self) -> dict:
        return {
            "voxel_size": list(self.voxel_size),
            "range": [list(r) for r in self.range],
            "bev_stride": int(self.bev_stride),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelConfig":
        d = dict(d)
        if "range" in d:
            d["range"] = tuple(tuple(r) for r in d["range"])
        if "voxel_size" in d:
            d["voxel_size"] = tuple(d["voxel_size"])
        return cls(**d)


def grid_shape(cfg: VoxelConfig) -> tuple[int, int, int]:
    """Number of voxels along x, y, z."""
    return tuple(
        _exact_ratio(hi - lo, size, f"{axis} range")
        for axis, (lo, hi), size in zip("xyz", cfg.range, cfg.voxel_size)
    )


def bev_shape(cfg: VoxelConfig) -> tuple[int, int]:
    """Feature-map size ``(nx, ny)`` after downsampling by ``bev_stride``."""
    (x0, x1), (y0, y1), _ = cfg.range
    dx, dy, _ = cfg.voxel_size
    nx = _exact_ratio(x1 - x0, dx * cfg.bev_stride, "x extent / (dx * bev_stride)")
    ny = _exact_ratio(y1 - y0, dy * cfg.bev_stride, "y extent / (dy * bev_stride)")
    return nx, ny


@dataclass
class VoxelGrid:
    """Occupied voxels: integer coords ``(M, 3)`` as (ix, iy, iz), mean features
    ``(M, 4)`` as (x, y, z, intensity), and point counts ``(M,)``.

    Rows are sorted by linear voxel index so two grids built from the same
    points compare equal.
    """

    coords: np.ndarray
    means: np.ndarray
    counts: np.ndarray
    shape: tuple[int, int, int] = field(default=(0, 0, 0))

    def __len__(self) -> int:
        return int(self.coords.shape[0])

    def __contains__(self, key) -> bool:
        return self._find(tuple(key)) is not None

    def __getitem__(self, key) -> tuple[np.ndarray, int]:
        i = self._find(tuple(key))
        if i is None:
            raise KeyError(key)
        return self.means[i], int(self.counts[i])

    def _find(self, key):
        hits = np.flatnonzero(np.all(self.coords == np.asarray(key), axis=1))
        return int(hits[0]) if hits.size else None

    def items(self) -> Iterator[tuple[tuple[int, int, int], tuple[np.ndarray, int]]]:
        for c, m, n in zip(self.coords, self.means, self.counts):
            yield (int(c[0]), int(c[1]), int(c[2])), (m, int(n))

    @property
    def total_points(self) -> int:
        return int(self.counts.sum())


def make_cloud(points) -> np.ndarray:
    """Coerce to an ``(N, 4)`` float64 cloud, clamping intensity into [0, 1]."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 4))
    pts = pts.reshape(-1, 4).copy()
    if not np.all(np.isfinite(pts[:, :3])):
        raise ValueError("point coordinates must be finite")
    pts[:, 3] = np.clip(np.nan_to_num(pts[:, 3], nan=0.0), 0.0, 1.0)
    return pts


def _bin_axis(v: np.ndarray, lo: float, size: float) -> np.ndarray:
    idx = np.floor((v - lo) / size).astype(np.int64)
    # agree with the voxel bounds lo + k*size used everywhere else
    idx += (lo + (idx + 1) * size) <= v
    idx -= v < (lo + idx * size)
    return idx


def voxelize(cloud, cfg: VoxelConfig | None = None) -> VoxelGrid:
    """Bin points into half-open voxels and average coordinates and intensity.

    Points outside the configured range are dropped. Within a voxel, points
    are reduced in a canonical sorted order, so the result does not depend on
    the input point order.
    """
    cfg = cfg or VoxelConfig()
    shape = grid_shape(cfg)
    pts = make_cloud(cloud)
    empty = VoxelGrid(
        np.zeros((0, 3), dtype=np.int64), np.zeros((0, 4)), np.zeros(0, dtype=np.int64), shape
    )
    if pts.shape[0] == 0:
        return empty

    idx = np.stack(
        [_bin_axis(pts[:, a], cfg.range[a][0], cfg.voxel_size[a]) for a in range(3)], axis=1
    )
    inside = np.all((idx >= 0) & (idx < np.array(shape)), axis=1)
    pts, idx = pts[inside], idx[inside]
    if pts.shape[0] == 0:
        return empty

    nx, ny, nz = shape
    linear = (idx[:, 2] * ny + idx[:, 1]) * nx + idx[:, 0]
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], linear))
    pts, linear, idx = pts[order], linear[order], idx[order]

    starts = np.flatnonzero(np.r_[True, linear[1:] != linear[:-1]])
    counts = np.diff(np.r_[starts, linear.size])
    sums = np.add.reduceat(pts, starts, axis=0)
    means = sums / counts[:, None]
    # a rounded mean must not escape the hull of its own points
    means = np.clip(
        means, np.minimum.reduceat(pts, starts, axis=0), np.maximum.reduceat(pts, starts, axis=0)
    )
    return VoxelGrid(idx[starts].astype(np.int64), means, counts.astype(np.int64), shape)


def load_velodyne(path) -> np.ndarray:
    """Read a KITTI velodyne ``.bin`` (little-endian float32 x, y, z, intensity)."""
    raw = np.fromfile(Path(path), dtype="<f4")
    if raw.size % 4:
        raise ValueError(f"{path}: size is not a multiple of 16 bytes")
    return raw.reshape(-1, 4)


def save_velodyne(path, points) -> None:
    pts = np.asarray(points).reshape(-1, 4).astype("<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    pts.tofile(Path(path))
