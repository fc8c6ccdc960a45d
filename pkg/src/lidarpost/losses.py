"""Loss components and their weighted total, evaluated on plain arrays.

Every function accepts scalars or numpy arrays and returns the elementwise
loss (a float for scalar input). Reductions and normalization live in
:func:`detection_loss`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LossWeights",
    "focal_loss",
    "smooth_l1",
    "direction_ce",
    "iou_loss",
    "total_loss",
    "LossBreakdown",
    "detection_loss",
]


def _out(x: np.ndarray):
    return float(x) if np.ndim(x) == 0 else x


@dataclass(frozen=True)
class LossWeights:
    omega: float = 2.0  # box regression
    mu: float = 0.2  # direction
    lam: float = 1.0  # IoU prediction

    def __post_init__(self):
        if min(self.omega, self.mu, self.lam) < 0:
            raise ValueError("loss weights must be nonnegative")


def focal_loss(p, y, alpha: float = 0.25, gamma: float = 2.0):
    """Binary focal loss for predicted probability ``p`` and label ``y``."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("focal loss needs probabilities strictly inside (0, 1)")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 or 1")
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p**gamma * np.log1p(-p)
    return _out(np.where(y == 1, pos, neg))


def smooth_l1(x, delta: float = 1.0):
    if delta <= 0:
        raise ValueError("delta must be positive")
    a = np.abs(np.asarray(x, dtype=np.float64))
    return _out(np.where(a < delta, 0.5 * a * a / delta, a - 0.5 * delta))


def direction_ce(logits, target):
    """Softmax cross-entropy over two direction logits (last axis)."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.int64)
    if z.shape[-1] != 2:
        raise ValueError("direction logits need two classes on the last axis")
    m = z.max(axis=-1)
    lse = m + np.log(np.exp(z[..., 0] - m) + np.exp(z[..., 1] - m))
    picked = np.take_along_axis(z, t[..., None], axis=-1)[..., 0]
    return _out(lse - picked)


def iou_loss(iou_t_pred, iou_t_target, positive=None):
    """Smooth-L1 on encoded IoUs, averaged over positives (0 when there are none)."""
    diff = np.asarray(iou_t_pred, dtype=np.float64) - np.asarray(iou_t_target, dtype=np.float64)
    if positive is not None:
        diff = diff[np.asarray(positive, dtype=bool)]
    if diff.ndim == 0:
        return float(smooth_l1(diff))
    if diff.size == 0:
        return 0.0
    return float(np.mean(smooth_l1(diff)))


def total_loss(l_cls: float, l_box: float, l_dir: float, l_iou: float, w: LossWeights | None = None) -> float:
    w = w or LossWeights()
    return l_cls + w.omega * l_box + w.mu * l_dir + w.lam * l_iou


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    box: float
    dir: float
    iou: float
    total: float


def detection_loss(
    cls_prob,
    labels,
    box_pred,
    box_target,
    dir_logits,
    dir_target,
    iou_t_pred,
    iou_t_target,
    weights: LossWeights | None = None,
    alpha: float = 0.25,
    gamma: float = 2.0,
    delta: float = 1.0,
) -> LossBreakdown:
    """Per-anchor losses reduced with the usual normalization.

    ``labels`` uses 1 / 0 / -1 for positive / negative / ignored anchors.
    Classification is averaged over positives and negatives; box, direction
    and IoU terms are averaged over positives only.
    """
    labels = np.asarray(labels)
    pos = labels == 1
    care = labels >= 0
    n_care = int(care.sum())
    n_pos = int(pos.sum())

    l_cls = 0.0
    if n_care:
        p = np.asarray(cls_prob, dtype=np.float64)[care]
        l_cls = float(np.sum(focal_loss(np.atleast_1d(p), pos[care].astype(int), alpha, gamma)) / n_care)

    l_box = l_dir = l_iou = 0.0
    if n_pos:
        r = np.asarray(box_pred, dtype=np.float64)[pos] - np.asarray(box_target, dtype=np.float64)[pos]
        l_box = float(np.sum(smooth_l1(r, delta)) / n_pos)
        l_dir = float(np.mean(direction_ce(np.asarray(dir_logits)[pos], np.asarray(dir_target)[pos])))
        l_iou = iou_loss(iou_t_pred, iou_t_target, pos)
    return LossBreakdown(l_cls, l_box, l_dir, l_iou, total_loss(l_cls, l_box, l_dir, l_iou, weights))
