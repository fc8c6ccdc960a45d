"""Distance-variant IoU-weighted NMS and a greedy NMS baseline.

DI-NMS first discounts each detection's confidence by how far its box
drifted from the anchor that produced it (a softmax over all drifts), then
repeatedly takes the best remaining box as a candidate, gathers every
remaining box overlapping it above ``iou_thres`` into an auxiliary set,
and removes that set from the pool. The set is fused into one box by a
Gaussian-in-IoU weighted average whose width ``sigma`` depends on the
candidate's distance from the sensor. The fused box is only emitted when
the set's IoU mass ``cnt = sum(iou_pred * IoU)`` exceeds ``cnt_thres``,
which drops isolated predictions that no other anchor corroborates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np

from .anchors import AnchorSet
from .confidence import Detection
from .geometry import Box3D, _wrap_scalar, bev_iou_pair, boxes_to_array, iou_3d_pair

__all__ = [
    "DiNmsConfig",
    "Cluster",
    "NmsResult",
    "refine_scores",
    "sigma_for",
    "fuse_boxes",
    "di_nms",
    "di_nms_arrays",
    "standard_nms",
    "standard_nms_indices",
]

DEFAULT_SIGMA_BUCKETS = ((20.0, 0.0009), (40.0, 0.009), (60.0, 0.1), (70.4, 1.0))


@dataclass(frozen=True)
class DiNmsConfig:
    """DI-NMS parameters.

    ``sigma_buckets`` pairs a BEV-distance upper bound (meters) with the
    Gaussian width used for candidates closer than that bound.
    ``score_threshold`` drops low-confidence detections before the
    distance softmax (``None`` disables it). ``sigma_mode`` picks one
    sigma per cluster from the candidate ("candidate") or one per member
    from the member's own distance ("auxiliary"). ``iou_mode`` selects BEV
    or full 3D IoU for clustering.
    """

    iou_thres: float = 0.3
    cnt_thres: float = 2.6
    sigma_buckets: tuple[tuple[float, float], ...] = DEFAULT_SIGMA_BUCKETS
    use_distance_softmax: bool = True
    score_threshold: float | None = 0.3
    sigma_mode: str = "candidate"
    iou_mode: str = "bev"

    def __post_init__(self):
        buckets = tuple((float(b), float(s)) for b, s in self.sigma_buckets)
        object.__setattr__(self, "sigma_buckets", buckets)
        if not 0.0 < self.iou_thres < 1.0:
            raise ValueError(f"iou_thres must lie in (0, 1), got {self.iou_thres}")
        if not buckets:
            raise ValueError("sigma_buckets must not be empty")
        bounds = [b for b, _ in buckets]
        if any(b1 <= b0 for b0, b1 in zip(bounds, bounds[1:])) or bounds[0] <= 0:
            raise ValueError(f"sigma bucket bounds must be positive and increasing: {bounds}")
        if any(not (s > 0) for _, s in buckets):
            raise ValueError("sigma values must be positive")
        if self.sigma_mode not in ("candidate", "auxiliary"):
            raise ValueError(f"unknown sigma_mode {self.sigma_mode!r}")
        if self.iou_mode not in ("bev", "3d"):
            raise ValueError(f"unknown iou_mode {self.iou_mode!r}")

    def to_dict(self) -> dict:
        return {
            "iou_thres": self.iou_thres,
            "cnt_thres": self.cnt_thres,
            "sigma_buckets": [list(b) for b in self.sigma_buckets],
            "use_distance_softmax": self.use_distance_softmax,
            "score_threshold": self.score_threshold,
            "sigma_mode": self.sigma_mode,
            "iou_mode": self.iou_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiNmsConfig":
        d = dict(d)
        if "sigma_buckets" in d:
            d["sigma_buckets"] = tuple(tuple(b) for b in d["sigma_buckets"])
        return cls(**d)


@dataclass(frozen=True)
class Cluster:
    """One iteration of the DI-NMS loop. Indices refer to the input list."""

    candidate: int
    members: tuple[int, ...]
    cnt: float
    sigma: float
    box: Box3D
    confidence: float
    refined_score: float
    kept: bool


@dataclass
class NmsResult:
    clusters: list[Cluster] = field(default_factory=list)

    @property
    def kept(self) -> list[Cluster]:
        return [c for c in self.clusters if c.kept]

    @property
    def boxes(self) -> list[Box3D]:
        return [c.box for c in self.clusters if c.kept]

    def __len__(self) -> int:
        return sum(1 for c in self.clusters if c.kept)

    def detections(self, name: str = "Car") -> list[Detection]:
        """Emitted boxes as detections carrying the candidate's confidence."""
        return [
            Detection(c.box, c.confidence, 1.0, -1, c.confidence, name=name)
            for c in self.clusters
            if c.kept
        ]

    def iter_jsonl(self) -> Iterable[str]:
        for c in self.clusters:
            yield json.dumps(
                {
                    "candidate": c.candidate,
                    "members": list(c.members),
                    "cnt": c.cnt,
                    "sigma": c.sigma,
                    "kept": c.kept,
                    "box": c.box.to_list(),
                    "confidence": c.confidence,
                }
            )


# ---------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _bucket(dist, bounds, sigmas):
    for k in range(bounds.shape[0]):
        if dist < bounds[k]:
            return sigmas[k]
    return sigmas[sigmas.shape[0] - 1]


@numba.njit(cache=True)
def _fuse(boxes, weights, members, n_members, ref, out):
    """Weighted mean of member boxes written into ``out``; ``ref`` is the
    candidate row. Returns False if the weights sum to zero."""
    wsum = 0.0
    for k in range(n_members):
        wsum += weights[k]
    if not wsum > 0.0:
        for j in range(7):
            out[j] = ref[j]
        return False
    # offsets from the candidate keep identical members bit-exact
    for j in range(6):
        acc = 0.0
        for k in range(n_members):
            acc += weights[k] * (boxes[members[k], j] - ref[j])
        out[j] = ref[j] + acc / wsum
    # axis-symmetric circular mean taken relative to the candidate yaw: the
    # half-angle lands in (-pi/2, pi/2], i.e. already in the candidate's half
    # plane, and identical yaws reproduce the candidate exactly
    s = 0.0
    c = 0.0
    for k in range(n_members):
        r2 = 2.0 * (boxes[members[k], 6] - ref[6])
        s += weights[k] * math.sin(r2)
        c += weights[k] * math.cos(r2)
    if math.hypot(s, c) <= 1e-12 * wsum:
        out[6] = ref[6]
        return True
    yaw = ref[6] + 0.5 * math.atan2(s, c)
    out[6] = _wrap_scalar(yaw)
    return True


@numba.njit(cache=True)
def _di_nms_core(boxes, iou_pred, refined, iou_thres, bounds, sigmas, per_member_sigma, use_3d):
    n = boxes.shape[0]
    alive = np.ones(n, dtype=np.bool_)
    cand = np.empty(n, dtype=np.int64)
    cnts = np.empty(n)
    sig = np.empty(n)
    fused = np.empty((n, 7))
    assign = np.full(n, -1, dtype=np.int64)
    ious = np.empty(n)
    members = np.empty(n, dtype=np.int64)
    weights = np.empty(n)
    remaining = n
    it = 0
    while remaining > 0:
        best = -1
        best_v = -np.inf
        for i in range(n):
            if alive[i] and refined[i] > best_v:
                best = i
                best_v = refined[i]
        if best < 0:  # only NaN scores left
            for i in range(n):
                if alive[i]:
                    best = i
                    break
        ref = boxes[best]
        m = 0
        for i in range(n):
            if not alive[i]:
                continue
            if i == best:
                v = 1.0
            elif use_3d:
                v = iou_3d_pair(boxes[i], ref)
            else:
                v = bev_iou_pair(boxes[i], ref)
            if v > iou_thres:
                members[m] = i
                ious[m] = v
                m += 1
        cnt = 0.0
        sigma_c = _bucket(math.hypot(ref[0], ref[1]), bounds, sigmas)
        for k in range(m):
            i = members[k]
            cnt += iou_pred[i] * ious[k]
            s = sigma_c
            if per_member_sigma:
                s = _bucket(math.hypot(boxes[i, 0], boxes[i, 1]), bounds, sigmas)
            d = 1.0 - ious[k]
            weights[k] = iou_pred[i] * math.exp(-(d * d) / (s * s))
        _fuse(boxes, weights, members, m, ref, fused[it])
        for k in range(m):
            alive[members[k]] = False
            assign[members[k]] = it
        remaining -= m
        cand[it] = best
        cnts[it] = cnt
        sig[it] = sigma_c
        it += 1
    return cand[:it], cnts[:it], sig[:it], fused[:it], assign


@numba.njit(cache=True)
def _greedy_core(boxes, order, iou_thres, use_3d):
    n = order.shape[0]
    suppressed = np.zeros(boxes.shape[0], dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    k = 0
    for a in range(n):
        i = order[a]
        if suppressed[i]:
            continue
        keep[k] = i
        k += 1
        for b in range(a + 1, n):
            j = order[b]
            if suppressed[j]:
                continue
            if use_3d:
                v = iou_3d_pair(boxes[i], boxes[j])
            else:
                v = bev_iou_pair(boxes[i], boxes[j])
            if v > iou_thres:
                suppressed[j] = True
    return keep[:k]


# ---------------------------------------------------------------------------
# public API


def _softmax(x: np.ndarray) -> np.ndarray:
    if x.size == 0:
        return x.copy()
    e = np.exp(x - x.max())
    return e / e.sum()


def _confidences(dets: Sequence[Detection]) -> np.ndarray:
    conf = np.empty(len(dets))
    for k, d in enumerate(dets):
        if d.confidence is None:
            raise ValueError(f"detection {k} has no confidence; run rectify_all first")
        conf[k] = d.confidence
    return conf


def _anchor_xy(dets: Sequence[Detection], anchors: AnchorSet) -> np.ndarray:
    idx = np.fromiter((d.anchor_index for d in dets), dtype=np.int64, count=len(dets))
    bad = np.flatnonzero((idx < 0) | (idx >= len(anchors)))
    if bad.size:
        raise ValueError(
            f"anchor_index out of range for detections {bad[:10].tolist()} "
            f"(anchor set has {len(anchors)} anchors)"
        )
    return anchors.boxes[idx, :2]


def refine_scores(
    dets: Sequence[Detection], anchors: AnchorSet, use_distance_softmax: bool = True
) -> np.ndarray:
    """Confidence times ``1 - softmax`` of the box-to-anchor BEV center distances."""
    conf = _confidences(dets)
    if not use_distance_softmax or len(dets) == 0:
        return conf
    boxes = boxes_to_array(d.box for d in dets)
    dist = np.hypot(*(boxes[:, :2] - _anchor_xy(dets, anchors)).T)
    return conf * (1.0 - _softmax(dist))


def sigma_for(candidate: Box3D, cfg: DiNmsConfig | None = None) -> float:
    """Gaussian width for a candidate at its BEV distance from the origin."""
    cfg = cfg or DiNmsConfig()
    d = math.hypot(candidate.x, candidate.y)
    for bound, sigma in cfg.sigma_buckets:
        if d < bound:
            return sigma
    return cfg.sigma_buckets[-1][1]


def fuse_boxes(aux: Sequence[tuple[Box3D, float]]) -> Box3D:
    """Weighted average of boxes; the first entry acts as the reference.

    Position and size are averaged arithmetically. Yaw uses the
    axis-symmetric circular mean (average of ``(sin 2r, cos 2r)``), then
    flipped by pi if needed to stay within 90 degrees of the reference yaw.
    """
    if not aux:
        raise ValueError("cannot fuse an empty set of boxes")
    boxes = boxes_to_array(b for b, _ in aux)
    weights = np.array([float(w) for _, w in aux])
    if np.any(weights < 0) or not weights.sum() > 0:
        raise ValueError("fusion weights must be nonnegative with a positive sum")
    out = np.empty(7)
    _fuse(boxes, weights, np.arange(len(aux)), len(aux), boxes[0], out)
    return Box3D(*out)


def di_nms_arrays(
    boxes: np.ndarray,
    iou_pred: np.ndarray,
    refined: np.ndarray,
    cfg: DiNmsConfig,
):
    """Array-level DI-NMS loop on already refined scores.

    Returns ``(candidates, cnts, sigmas, fused_boxes, assignment)``, one
    entry per loop iteration; ``assignment[i]`` is the iteration that
    consumed detection ``i``.
    """
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 7)
    bounds = np.array([b for b, _ in cfg.sigma_buckets])
    sigmas = np.array([s for _, s in cfg.sigma_buckets])
    return _di_nms_core(
        boxes,
        np.ascontiguousarray(iou_pred, dtype=np.float64),
        np.ascontiguousarray(refined, dtype=np.float64),
        float(cfg.iou_thres),
        bounds,
        sigmas,
        cfg.sigma_mode == "auxiliary",
        cfg.iou_mode == "3d",
    )


def di_nms(
    dets: Sequence[Detection], anchors: AnchorSet, cfg: DiNmsConfig | None = None
) -> NmsResult:
    """Run DI-NMS over rectified detections.

    Each emitted box inherits the rectified confidence of its candidate.
    """
    cfg = cfg or DiNmsConfig()
    conf = _confidences(dets)
    _anchor_xy(dets, anchors)
    if cfg.score_threshold is not None:
        sel = np.flatnonzero(conf >= cfg.score_threshold)
    else:
        sel = np.arange(len(dets))
    if sel.size == 0:
        return NmsResult()
    pool = [dets[i] for i in sel]
    boxes = boxes_to_array(d.box for d in pool)
    iou_pred = np.array([d.iou_pred for d in pool])
    refined = refine_scores(pool, anchors, cfg.use_distance_softmax)

    cand, cnts, sigmas, fused, assign = di_nms_arrays(boxes, iou_pred, refined, cfg)
    groups: list[list[int]] = [[] for _ in range(len(cand))]
    for i, it in enumerate(assign.tolist()):
        groups[it].append(int(sel[i]))

    clusters = []
    for it, c in enumerate(cand.tolist()):
        cnt = float(cnts[it])
        clusters.append(
            Cluster(
                candidate=int(sel[c]),
                members=tuple(groups[it]),
                cnt=cnt,
                sigma=float(sigmas[it]),
                box=Box3D(*fused[it]),
                confidence=float(conf[sel[c]]),
                refined_score=float(refined[c]),
                kept=cnt > cfg.cnt_thres,
            )
        )
    return NmsResult(clusters)


def standard_nms_indices(
    dets: Sequence[Detection],
    iou_thres: float = 0.3,
    iou_mode: str = "bev",
    score_threshold: float | None = None,
) -> list[int]:
    """Greedy NMS on confidence; ties go to the lower index."""
    if not dets:
        return []
    conf = _confidences(dets)
    order = np.argsort(-conf, kind="stable")
    if score_threshold is not None:
        order = order[conf[order] >= score_threshold]
    boxes = boxes_to_array(d.box for d in dets)
    keep = _greedy_core(boxes, order.astype(np.int64), float(iou_thres), iou_mode == "3d")
    return keep.tolist()


def standard_nms(
    dets: Sequence[Detection],
    iou_thres: float = 0.3,
    iou_mode: str = "bev",
    score_threshold: float | None = None,
) -> list[Detection]:
    return [dets[i] for i in standard_nms_indices(dets, iou_thres, iou_mode, score_threshold)]
