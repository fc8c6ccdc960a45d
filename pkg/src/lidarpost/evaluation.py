"""KITTI-style 3D average precision with difficulty-aware matching.

Matching is greedy over detections in descending confidence. Each
detection takes the unmatched valid ground truth with the highest 3D IoU
above the threshold. Failing that, it may be absorbed by an ignored ground
truth (similar class, or target class at a harder difficulty) or by a
DontCare region, in which case it counts as neither TP nor FP. Because the
greedy pass is prefix-stable, one pass yields the full PR curve.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .confidence import Detection
from .geometry import Box3D, boxes_to_array, iou_3d_matrix, bev_iou_matrix
from .kitti import (
    Calib,
    Difficulty,
    KittiFormatError,
    LabeledBox,
    assign_difficulty,
    camera_to_lidar,
    parse_calib_file,
    parse_label_file,
)

__all__ = [
    "TP",
    "FP",
    "IGNORED",
    "UndefinedAPError",
    "MissingFramesError",
    "EvalConfig",
    "ScoredBox",
    "FrameData",
    "FrameMatch",
    "EvalReport",
    "DatasetReport",
    "match_frame",
    "pr_curve",
    "compute_ap",
    "evaluate",
    "evaluate_dataset",
    "load_kitti_frames",
    "annotate_real_iou",
    "format_report",
    "pr_csv",
]

TP = 1
FP = 0
IGNORED = -1

LEVELS = (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD)


class UndefinedAPError(ValueError):
    """AP requested with no valid ground truth of the evaluated difficulty."""


class MissingFramesError(ValueError):
    def __init__(self, missing_dets: Sequence[str], missing_gts: Sequence[str], missing_calib: Sequence[str] = ()):
        self.missing_dets = sorted(missing_dets)
        self.missing_gts = sorted(missing_gts)
        self.missing_calib = sorted(missing_calib)
        parts = []
        if self.missing_dets:
            parts.append(f"no detections for frames {self.missing_dets}")
        if self.missing_gts:
            parts.append(f"no ground truth for frames {self.missing_gts}")
        if self.missing_calib:
            parts.append(f"no calibration for frames {self.missing_calib}")
        super().__init__("; ".join(parts))


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation settings.

    Attributes:
        iou_threshold: overlap a detection needs (strictly exceeded) to match.
        recall_points: 11 (r = 0, 0.1, ..., 1) or 40 (r = 1/40, ..., 1).
        difficulty: level evaluated by :func:`match_frame` / :func:`compute_ap`.
        class_name: target class.
        similar_classes: classes whose gts absorb detections without counting.
        iou_mode: ``"3d"`` or ``"bev"``.
    """

    iou_threshold: float = 0.7
    recall_points: int = 40
    difficulty: Difficulty = Difficulty.MODERATE
    class_name: str = "Car"
    similar_classes: tuple[str, ...] = ("Van",)
    iou_mode: str = "3d"

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")
        if self.recall_points not in (11, 40):
            raise ValueError(f"recall_points must be 11 or 40, got {self.recall_points}")
        if self.iou_mode not in ("3d", "bev"):
            raise ValueError(f"iou_mode must be '3d' or 'bev', got {self.iou_mode!r}")
        object.__setattr__(self, "difficulty", Difficulty.parse(self.difficulty))
        object.__setattr__(self, "similar_classes", tuple(self.similar_classes))

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "recall_points": self.recall_points,
            "difficulty": self.difficulty.label,
            "class_name": self.class_name,
            "similar_classes": list(self.similar_classes),
            "iou_mode": self.iou_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        return cls(**d)


@dataclass(frozen=True)
class ScoredBox:
    """A detection read from a result file."""

    box: Box3D
    score: float
    name: str = "Car"
    bbox2d: tuple[float, float, float, float] | None = None


@dataclass
class FrameData:
    dets: list = field(default_factory=list)
    gts: list[LabeledBox] = field(default_factory=list)
    dontcare: list[tuple[float, float, float, float]] = field(default_factory=list)


@dataclass
class FrameMatch:
    """Per-frame outcome; detection arrays follow the input order."""

    scores: np.ndarray
    states: np.ndarray  # TP / FP / IGNORED
    matched_gt: np.ndarray  # gt index or -1
    gt_valid: np.ndarray  # bool per gt
    gt_matched: np.ndarray  # bool per gt

    @property
    def n_valid_gt(self) -> int:
        return int(self.gt_valid.sum())


def _conf(d) -> float:
    c = getattr(d, "confidence", None)
    return float(d.score if c is None else c)


def _overlap_matrix(dets, gts, mode: str) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    a = boxes_to_array([d.box for d in dets])
    b = boxes_to_array([g.box for g in gts])
    return iou_3d_matrix(a, b) if mode == "3d" else bev_iou_matrix(a, b)


def _area_fraction(det_bbox, region) -> float:
    iw = min(det_bbox[2], region[2]) - max(det_bbox[0], region[0])
    ih = min(det_bbox[3], region[3]) - max(det_bbox[1], region[1])
    area = (det_bbox[2] - det_bbox[0]) * (det_bbox[3] - det_bbox[1])
    if iw <= 0 or ih <= 0 or area <= 0:
        return 0.0
    return iw * ih / area


def match_frame(dets: Sequence, gts: Sequence[LabeledBox], cfg: EvalConfig | None = None, dontcare=()) -> FrameMatch:
    """Greedy matching of one frame's detections against its ground truths.

    Detections are processed by descending confidence (input order on ties).
    Detections of other classes are ignored. A detection whose 2D box covers
    a DontCare region by more than ``iou_threshold`` of its own area is
    ignored instead of counted as FP.
    """
    cfg = cfg or EvalConfig()
    n, g = len(dets), len(gts)
    scores = np.array([_conf(d) for d in dets], dtype=np.float64)
    states = np.full(n, FP, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)

    valid = np.array([gt.name == cfg.class_name and gt.difficulty <= cfg.difficulty for gt in gts], dtype=bool)
    absorbing = np.array(
        [
            (gt.name == cfg.class_name and gt.difficulty > cfg.difficulty) or gt.name in cfg.similar_classes
            for gt in gts
        ],
        dtype=bool,
    )
    taken = np.zeros(g, dtype=bool)
    ov = _overlap_matrix(list(dets), list(gts), cfg.iou_mode)
    thr = cfg.iou_threshold

    order = np.argsort(-scores, kind="stable")
    for i in order:
        d = dets[i]
        if d.name != cfg.class_name:
            states[i] = IGNORED
            continue
        row = ov[i]
        best, best_j = -1.0, -1
        for j in range(g):
            if valid[j] and not taken[j] and row[j] > thr and row[j] > best:
                best, best_j = row[j], j
        if best_j >= 0:
            states[i], matched[i] = TP, best_j
            taken[best_j] = True
            continue
        for j in range(g):
            if absorbing[j] and not taken[j] and row[j] > thr and row[j] > best:
                best, best_j = row[j], j
        if best_j >= 0:
            states[i], matched[i] = IGNORED, best_j
            taken[best_j] = True
            continue
        bbox = getattr(d, "bbox2d", None)
        if bbox is not None and any(_area_fraction(bbox, r) > thr for r in dontcare):
            states[i] = IGNORED
    return FrameMatch(scores, states, matched, valid, taken & valid)


@dataclass
class EvalReport:
    """AP for one difficulty, as a percentage in [0, 100]."""

    ap: float
    difficulty: Difficulty
    recall_points: int
    n_gt: int
    n_tp: int
    n_fp: int
    n_ignored: int
    samples: list[tuple[float, float]]  # (recall level, interpolated precision)
    recall: np.ndarray = field(repr=False)  # operating points
    precision: np.ndarray = field(repr=False)
    thresholds: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "difficulty": self.difficulty.label,
            "recall_points": self.recall_points,
            "n_gt": self.n_gt,
            "tp": self.n_tp,
            "fp": self.n_fp,
            "ignored": self.n_ignored,
            "samples": [list(s) for s in self.samples],
        }


def pr_curve(matches: Iterable[FrameMatch]) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
    """Cumulative (tp, fp, score) at every distinct score threshold, plus gt and ignored counts."""
    scores, states, n_gt = [], [], 0
    for m in matches:
        scores.append(m.scores)
        states.append(m.states)
        n_gt += m.n_valid_gt
    s = np.concatenate(scores) if scores else np.zeros(0)
    st = np.concatenate(states) if states else np.zeros(0, dtype=np.int64)
    n_ign = int(np.count_nonzero(st == IGNORED))
    keep = st != IGNORED
    s, st = s[keep], st[keep]
    order = np.argsort(-s, kind="stable")
    s, st = s[order], st[order]
    tp = np.cumsum(st == TP)
    fp = np.cumsum(st == FP)
    # operating points sit at the end of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True]) if s.size else np.zeros(0, dtype=np.int64)
    return tp[ends], fp[ends], s[ends], n_gt, n_ign


def compute_ap(matches: Iterable[FrameMatch], cfg: EvalConfig | None = None) -> EvalReport:
    """Interpolated AP over the matched frames.

    Interpolated precision at recall r is the maximum precision over
    operating points with recall >= r (0 when none reach r).

    Raises:
        UndefinedAPError: no valid ground truth across the frames.
    """
    cfg = cfg or EvalConfig()
    tp, fp, thr, n_gt, n_ign = pr_curve(list(matches))
    if n_gt == 0:
        raise UndefinedAPError(f"no {cfg.class_name} ground truth at difficulty {cfg.difficulty.label}")
    precision = tp / np.maximum(tp + fp, 1)
    if cfg.recall_points == 11:
        ks, den = range(0, 11), 10
    else:
        ks, den = range(1, 41), 40
    samples = []
    for k in ks:
        reach = tp * den >= k * n_gt  # recall >= k/den, in integers
        p = float(precision[reach].max()) if reach.any() else 0.0
        samples.append((k / den, p))
    ap = 100.0 * sum(p for _, p in samples) / len(samples)
    return EvalReport(
        ap=ap,
        difficulty=cfg.difficulty,
        recall_points=cfg.recall_points,
        n_gt=n_gt,
        n_tp=int(tp[-1]) if tp.size else 0,
        n_fp=int(fp[-1]) if fp.size else 0,
        n_ignored=n_ign,
        samples=samples,
        recall=tp / n_gt,
        precision=precision,
        thresholds=thr,
    )


@dataclass
class DatasetReport:
    reports: dict[Difficulty, EvalReport | None]
    cfg: EvalConfig

    def ap(self, level) -> float | None:
        r = self.reports.get(Difficulty.parse(level))
        return None if r is None else r.ap

    def to_dict(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "results": {
                lvl.label: (None if r is None else r.to_dict()) for lvl, r in self.reports.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _map(fn, items, threads: int | None):
    if threads is not None and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def evaluate(
    frames: Mapping[str, FrameData],
    cfg: EvalConfig | None = None,
    levels: Sequence[Difficulty] = LEVELS,
    threads: int | None = None,
) -> DatasetReport:
    """AP per difficulty over in-memory frames (frame-id order, thread-count independent).

    Levels without any valid ground truth report ``None``.
    """
    cfg = cfg or EvalConfig()
    ids = sorted(frames)
    reports: dict[Difficulty, EvalReport | None] = {}
    for lvl in levels:
        c = replace(cfg, difficulty=lvl)

        def run(fid, c=c):
            f = frames[fid]
            return match_frame(f.dets, f.gts, c, f.dontcare)

        matches = _map(run, ids, threads)
        try:
            reports[Difficulty.parse(lvl)] = compute_ap(matches, c)
        except UndefinedAPError:
            reports[Difficulty.parse(lvl)] = None
    return DatasetReport(reports, cfg)


def _frame_ids(directory: Path, suffix: str) -> set[str]:
    return {p.stem for p in directory.glob(f"*{suffix}")}


def load_kitti_frames(det_dir, gt_dir, calib_dir) -> dict[str, FrameData]:
    """Read aligned KITTI result / label / calib directories into frames.

    Raises:
        MissingFramesError: frame ids differ between the directories.
        KittiFormatError: a file does not parse.
    """
    det_dir, gt_dir, calib_dir = Path(det_dir), Path(gt_dir), Path(calib_dir)
    det_ids = _frame_ids(det_dir, ".txt")
    gt_ids = _frame_ids(gt_dir, ".txt")
    cal_ids = _frame_ids(calib_dir, ".txt")
    if det_ids != gt_ids or not gt_ids <= cal_ids:
        raise MissingFramesError(gt_ids - det_ids, det_ids - gt_ids, gt_ids - cal_ids)
    frames = {}
    for fid in sorted(gt_ids):
        calib = parse_calib_file((calib_dir / f"{fid}.txt").read_text())
        frames[fid] = _frame_from_labels(
            (gt_dir / f"{fid}.txt").read_text(), (det_dir / f"{fid}.txt").read_text(), calib, fid
        )
    return frames


def _frame_from_labels(gt_text: str, det_text: str, calib: Calib, fid: str) -> FrameData:
    try:
        gt_labels = parse_label_file(gt_text)
        det_labels = parse_label_file(det_text)
    except KittiFormatError as e:
        raise KittiFormatError(f"frame {fid}: {e}") from None
    frame = FrameData()
    for lab in gt_labels:
        if lab.name == "DontCare":
            frame.dontcare.append(tuple(lab.bbox))
            continue
        frame.gts.append(
            LabeledBox(camera_to_lidar(lab, calib), lab.name, assign_difficulty(lab), tuple(lab.bbox))
        )
    for lab in det_labels:
        if lab.score is None:
            raise KittiFormatError(f"frame {fid}: detection without score")
        frame.dets.append(ScoredBox(camera_to_lidar(lab, calib), lab.score, lab.name, tuple(lab.bbox)))
    return frame


def evaluate_dataset(det_dir, gt_dir, calib_dir, cfg: EvalConfig | None = None, threads: int | None = None) -> DatasetReport:
    return evaluate(load_kitti_frames(det_dir, gt_dir, calib_dir), cfg, threads=threads)


def annotate_real_iou(dets: Sequence[Detection], gts: Sequence[LabeledBox], mode: str = "3d") -> list[Detection]:
    """Attach the best IoU against same-class ground truths (0 when none) as ``real_iou``."""
    out = []
    ov = _overlap_matrix(list(dets), list(gts), mode)
    for i, d in enumerate(dets):
        same = [j for j, g in enumerate(gts) if g.name == d.name]
        best = float(ov[i, same].max()) if same else 0.0
        out.append(replace(d, real_iou=best))
    return out


def format_report(report: DatasetReport) -> str:
    cfg = report.cfg
    head = f"{cfg.class_name} AP_{cfg.iou_mode.upper()}@{cfg.iou_threshold:g} ({cfg.recall_points} recall points)"
    lines = [head]
    for lvl, r in report.reports.items():
        val = "n/a" if r is None else f"{r.ap:7.4f}"
        lines.append(f"  {lvl.label:<9}{val}")
    return "\n".join(lines) + "\n"


def pr_csv(report: EvalReport) -> str:
    """Operating points as CSV with columns threshold, recall, precision."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "recall", "precision"])
    for t, r, p in zip(report.thresholds, report.recall, report.precision):
        w.writerow([repr(float(t)), repr(float(r)), repr(float(p))])
    return buf.getvalue()
