import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidarpost.anchors import (
    IGNORED,
    NEGATIVE,
    POSITIVE,
    AnchorConfig,
    assign_targets,
    decode_box,
    decode_boxes,
    direction_target,
    encode_box,
    encode_boxes,
    generate_anchors,
)
from lidarpost.geometry import Box3D, normalize_angle
from lidarpost.voxelizer import ConfigError, VoxelConfig


def small_cfg(**kw):
    base = dict(origin=(0.0, 0.0), extent=(8.0, 8.0), stride=(4.0, 4.0), orientations=(0.0,))
    base.update(kw)
    return AnchorConfig(**base)


def test_default_anchor_count():
    a = generate_anchors()
    assert len(a) == 176 * 200 * 2 == 70_400
    assert a.shape == (200, 176, 2)


def test_single_cell_anchor():
    a = generate_anchors(small_cfg(extent=(4.0, 4.0)))
    assert len(a) == 1
    assert a[0] == Box3D(2.0, 2.0, -1.0, 1.6, 3.9, 1.56, 0.0)


def test_first_cell_center():
    a = generate_anchors(AnchorConfig(origin=(0.0, 0.0), extent=(4.0, 4.0)))
    assert a.boxes[0, 0] == pytest.approx(0.2)
    assert a.boxes[0, 1] == pytest.approx(0.2)


def test_layout_row_major():
    a = generate_anchors()
    i = a.index(3, 5, 1)
    assert a.boxes[i, 0] == pytest.approx(0.4 * 5.5)
    assert a.boxes[i, 1] == pytest.approx(-40 + 0.4 * 3.5)
    assert a.boxes[i, 6] == pytest.approx(math.pi / 2)
    x, y = a.boxes[:, 0], a.boxes[:, 1]
    assert x.min() > 0 and x.max() < 70.4 and y.min() > -40 and y.max() < 40


def test_nearest_anchor():
    a = generate_anchors()
    i = a.nearest(10.1, -3.05, 1.4)
    assert a.boxes[i, 6] == pytest.approx(math.pi / 2)
    assert abs(a.boxes[i, 0] - 10.1) <= 0.2 and abs(a.boxes[i, 1] + 3.05) <= 0.2


def test_config_validation_and_dict():
    with pytest.raises(ConfigError):
        AnchorConfig(neg_threshold=0.7, pos_threshold=0.6)
    with pytest.raises(ConfigError):
        AnchorConfig(orientations=())
    with pytest.raises(ConfigError):
        AnchorConfig(extent=(70.3, 80.0))
    cfg = AnchorConfig(z_center=-0.5)
    assert AnchorConfig.from_dict(cfg.to_dict()) == cfg
    assert AnchorConfig.from_voxel_config(VoxelConfig()).grid_size == (176, 200)


# -- residual coding ---------------------------------------------------------

ANCHOR = Box3D(10.0, 2.0, -1.0, 1.6, 3.9, 1.56, 0.0)


def test_encode_identity_and_unit_steps():
    assert np.all(encode_box(ANCHOR, ANCHOR) == 0)
    d = math.hypot(1.6, 3.9)
    t = encode_box(ANCHOR, Box3D(10.0 + d, 2.0, -1.0, 1.6, 3.9, 1.56))
    assert t == pytest.approx([1, 0, 0, 0, 0, 0, 0], abs=1e-15)
    t = encode_box(ANCHOR, Box3D(10.0, 2.0, -1.0, 1.6 * math.e, 3.9, 1.56))
    assert t[3] == pytest.approx(1.0, abs=1e-15)


def test_encode_rejects_bad_gt_dims():
    with pytest.raises(ValueError):
        encode_boxes(ANCHOR.to_array(), np.array([0, 0, 0, 0.0, 1, 1, 0]))


def test_decode_zero_and_pi():
    assert decode_box(ANCHOR, np.zeros(7)) == ANCHOR
    b = decode_box(Box3D(0, 0, 0, 1, 1, 1, 0.5), [0, 0, 0, 0, 0, 0, math.pi])
    assert b.r == pytest.approx(normalize_angle(0.5 + math.pi))
    with pytest.raises(ValueError):
        decode_box(ANCHOR, [0, 0, 0, 0, 0, float("nan"), 0])


def test_round_trip_random_pairs():
    rng = np.random.default_rng(99)
    n = 10_000
    a = np.column_stack([rng.uniform(0, 70, n), rng.uniform(-40, 40, n), rng.uniform(-3, 1, n),
                         rng.uniform(0.5, 5, (n, 3)), rng.uniform(-math.pi, math.pi, n)])
    g = np.column_stack([a[:, :3] + rng.normal(0, 2, (n, 3)), a[:, 3:6] * rng.uniform(0.3, 3, (n, 3)),
                         rng.uniform(-math.pi, math.pi, n)])
    back = decode_boxes(a, encode_boxes(a, g))
    assert np.max(np.abs(back[:, :6] - g[:, :6])) <= 1e-12
    assert np.max(np.abs(normalize_angle(back[:, 6] - g[:, 6]))) <= 1e-12


@pytest.mark.parametrize("yaw,bit", [(0.0, 1), (-math.pi / 2, 0), (math.pi / 2, 1), (math.pi, 0), (2 * math.pi + 0.1, 1)])
def test_direction_target(yaw, bit):
    assert direction_target(yaw) == bit


# -- assignment --------------------------------------------------------------


def test_assign_thresholds():
    cfg = small_cfg(dims=(2.0, 2.0, 1.5))
    anchors = generate_anchors(cfg)  # centers (2,2) (6,2) (2,6) (6,6)
    # IoU of equal 2x2 squares offset by s: (2-s)/(2+s)
    s_pos = 2 * (1 - 0.7) / (1 + 0.7)
    s_ign = 2 * (1 - 0.5) / (1 + 0.5)
    gts = [Box3D(2 + s_pos, 2, -1, 2, 2, 1.5), Box3D(6 + s_ign, 6, -1, 2, 2, 1.5)]
    ta = assign_targets(anchors, gts)
    assert ta.max_iou[0] == pytest.approx(0.7)
    assert ta.labels[0] == POSITIVE and ta.matched_gt[0] == 0
    assert ta.max_iou[3] == pytest.approx(0.5)
    # the 0.5 anchor is also gt 1's best, so the force-match promotes it
    assert ta.labels[3] == POSITIVE and ta.matched_gt[3] == 1
    assert ta.labels[1] == NEGATIVE and ta.labels[2] == NEGATIVE


def test_assign_ignored_band():
    cfg = small_cfg(dims=(2.0, 2.0, 1.5), extent=(4.0, 4.0), stride=(2 / 3, 2 / 3))
    anchors = generate_anchors(cfg)
    ta = assign_targets(anchors, [Box3D(1.0, 1.0, -1, 2, 2, 1.5)])
    at = anchors.index(1, 1, 0)  # center (1, 1)
    right = anchors.index(1, 2, 0)  # offset 2/3: IoU 0.5
    diag = anchors.index(2, 2, 0)  # IoU 16/56
    assert ta.labels[at] == POSITIVE
    assert ta.max_iou[right] == pytest.approx(0.5)
    assert ta.labels[right] == IGNORED
    assert ta.max_iou[diag] == pytest.approx(16 / 56)
    assert ta.labels[diag] == NEGATIVE
    assert ta.num_positive == 1


def test_force_match_low_iou():
    cfg = small_cfg(dims=(2.0, 2.0, 1.5))
    anchors = generate_anchors(cfg)
    s = 2 * (1 - 0.3) / (1 + 0.3)
    ta = assign_targets(anchors, [Box3D(2 + s, 2, -1, 2, 2, 1.5)])
    assert ta.max_iou[0] == pytest.approx(0.3)
    assert ta.labels[0] == POSITIVE
    assert ta.num_positive == 1
    assert np.all(np.isfinite(ta.reg_targets))
    assert ta.reg_targets[0, 0] == pytest.approx(s / math.hypot(2, 2))


def test_shared_best_anchor_goes_to_stronger_gt():
    cfg = small_cfg(dims=(3.0, 3.0, 1.5))
    anchors = generate_anchors(cfg)  # 3x3 anchors 4 m apart
    gts = [Box3D(3.6, 2, -1, 3, 3, 1.5), Box3D(2, 2, -1, 3, 3, 1.5)]
    ta = assign_targets(anchors, gts)
    assert ta.labels[0] == POSITIVE and ta.matched_gt[0] == 1
    assert ta.max_iou[1] == pytest.approx(0.6 / 5.4)
    # gt 0 falls back to its next best anchor
    assert ta.labels[1] == POSITIVE and ta.matched_gt[1] == 0


def test_assign_empty_gts():
    anchors = generate_anchors(small_cfg())
    ta = assign_targets(anchors, [])
    assert np.all(ta.labels == NEGATIVE)
    assert ta.num_positive == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_assign_partition_and_permutation(seed):
    rng = np.random.default_rng(seed)
    cfg = AnchorConfig(origin=(0.0, 0.0), extent=(12.0, 12.0), stride=(1.0, 1.0))
    anchors = generate_anchors(cfg)
    n = int(rng.integers(1, 5))
    gts = [Box3D(rng.uniform(1, 11), rng.uniform(1, 11), -1, 1.6, 3.9, 1.56, rng.uniform(-3, 3)) for _ in range(n)]
    ta = assign_targets(anchors, gts)
    assert set(np.unique(ta.labels)) <= {POSITIVE, NEGATIVE, IGNORED}
    assert np.all((ta.matched_gt >= 0) == (ta.labels == POSITIVE))
    assert set(ta.matched_gt[ta.labels == POSITIVE]) == set(range(n))
    assert np.all(np.isfinite(ta.reg_targets))
    perm = rng.permutation(n)
    tb = assign_targets(anchors, [gts[k] for k in perm])
    assert np.array_equal(ta.labels, tb.labels)
    pos = ta.labels == POSITIVE
    assert np.array_equal(ta.matched_gt[pos], perm[tb.matched_gt[pos]])
