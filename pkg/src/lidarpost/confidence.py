"""IoU-aware confidence rectification and IoU-target encoding.

A detection's classification score ``c`` is rectified with its predicted
IoU ``i`` as ``f = c * i**beta``. Larger ``beta`` pushes low-IoU predictions
further down the ranking while leaving ``i == 1`` untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from .geometry import Box3D

__all__ = [
    "Detection",
    "RectifyConfig",
    "UndefinedCorrelationError",
    "rectify",
    "rectify_all",
    "encode_iou_target",
    "decode_iou_target",
    "iou_from_regression",
    "pearson",
    "SweepRow",
    "beta_sweep",
    "format_sweep",
]


@dataclass(frozen=True)
class Detection:
    """One predicted box.

    ``confidence`` is filled by :func:`rectify_all`. ``real_iou`` is an
    optional annotation (IoU against the matched ground truth) used by the
    beta sweep.
    """

    box: Box3D
    score: float
    iou_pred: float = 1.0
    anchor_index: int = -1
    confidence: float | None = None
    real_iou: float | None = None
    name: str = "Car"

    def to_dict(self) -> dict:
        d = {
            "box": self.box.to_list(),
            "score": self.score,
            "iou_pred": self.iou_pred,
            "anchor_index": self.anchor_index,
        }
        if self.confidence is not None:
            d["confidence"] = self.confidence
        if self.real_iou is not None:
            d["real_iou"] = self.real_iou
        if self.name != "Car":
            d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(
            box=Box3D.from_array(d["box"]),
            score=float(d["score"]),
            iou_pred=float(d.get("iou_pred", 1.0)),
            anchor_index=int(d.get("anchor_index", -1)),
            confidence=None if d.get("confidence") is None else float(d["confidence"]),
            real_iou=None if d.get("real_iou") is None else float(d["real_iou"]),
            name=d.get("name", "Car"),
        )


@dataclass(frozen=True)
class RectifyConfig:
    beta: float = 4.0

    def __post_init__(self):
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be a finite nonnegative number, got {self.beta}")


def rectify(score: float, iou_pred: float, beta: float) -> float:
    """Rectified confidence ``score * iou_pred**beta`` with ``0**0 == 1``."""
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score must lie in [0, 1], got {score}")
    if not 0.0 <= iou_pred <= 1.0:
        raise ValueError(f"iou_pred must lie in [0, 1], got {iou_pred}")
    if not beta >= 0.0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    if beta == 0.0:
        return score
    return score * iou_pred**beta


def rectify_all(dets: Sequence[Detection], cfg: RectifyConfig | None = None) -> list[Detection]:
    """Fill ``confidence`` on every detection, preserving order."""
    beta = (cfg or RectifyConfig()).beta
    c = np.fromiter((d.score for d in dets), dtype=np.float64, count=len(dets))
    i = np.fromiter((d.iou_pred for d in dets), dtype=np.float64, count=len(dets))
    bad = np.flatnonzero(~((c >= 0) & (c <= 1) & (i >= 0) & (i <= 1)))
    if bad.size:
        k = int(bad[0])
        try:
            rectify(dets[k].score, dets[k].iou_pred, beta)
        except ValueError as exc:
            raise ValueError(f"detection {k}: {exc}") from None
    f = c if beta == 0.0 else c * i**beta
    out = []
    for d, v in zip(dets, f.tolist()):
        # shallow copy of a frozen instance without re-running __init__
        r = object.__new__(type(d))
        r.__dict__.update(d.__dict__)
        r.__dict__["confidence"] = v
        out.append(r)
    return out


def encode_iou_target(iou):
    """Map an IoU in [0, 1] to a regression target in [-1, 1]."""
    arr = np.asarray(iou, dtype=np.float64)
    if np.any(~((arr >= 0.0) & (arr <= 1.0))):
        raise ValueError(f"IoU must lie in [0, 1], got {iou}")
    out = 2.0 * (arr - 0.5)
    return float(out) if out.ndim == 0 else out


def decode_iou_target(iou_t):
    arr = np.asarray(iou_t, dtype=np.float64)
    if np.any(~((arr >= -1.0) & (arr <= 1.0))):
        raise ValueError(f"encoded IoU must lie in [-1, 1], got {iou_t}")
    out = arr / 2.0 + 0.5
    return float(out) if out.ndim == 0 else out


def iou_from_regression(raw):
    """Decode a raw IoU-branch output, clamping overshoot beyond [-1, 1]."""
    return decode_iou_target(np.clip(np.asarray(raw, dtype=np.float64), -1.0, 1.0))


class UndefinedCorrelationError(ValueError):
    pass


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise UndefinedCorrelationError("need at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant sequence")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class SweepRow:
    beta: float
    pcc: float
    n: int
    ap_moderate: float | None = None


def beta_sweep(dets: Sequence[Detection], betas: Sequence[float]) -> list[SweepRow]:
    """PCC between real IoU and ``score * iou_pred**beta`` for each beta."""
    if len(dets) < 2:
        raise ValueError("beta sweep needs at least two detections")
    missing = [k for k, d in enumerate(dets) if d.real_iou is None]
    if missing:
        raise ValueError(f"detections without real_iou annotation: {missing[:10]}")
    real = np.array([d.real_iou for d in dets])
    scores = np.array([d.score for d in dets])
    ious = np.array([d.iou_pred for d in dets])
    rows = []
    for beta in betas:
        conf = scores if beta == 0 else scores * ious**beta
        rows.append(SweepRow(float(beta), pearson(real, conf), len(dets)))
    return rows


def format_sweep(rows: Sequence[SweepRow], out: TextIO | None = None) -> str:
    """Tab-separated ``beta, pcc, n`` table (plus a synthetic AP column when present)."""
    with_ap = any(r.ap_moderate is not None for r in rows)
    header = ["beta", "pcc", "n"] + (["ap_mod_synthetic"] if with_ap else [])
    lines = ["\t".join(header)]
    for r in rows:
        cells = [f"{r.beta:g}", f"{r.pcc:.6f}", str(r.n)]
        if with_ap:
            cells.append("" if r.ap_moderate is None else f"{r.ap_moderate:.4f}")
        lines.append("\t".join(cells))
    text = "\n".join(lines) + "\n"
    if out is not None:
        out.write(text)
    return text
