"""One check per acceptance criterion; a PASS/FAIL line per criterion is
printed in the terminal summary."""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from lidarpost.anchors import decode_boxes, encode_boxes, generate_anchors
from lidarpost.cli import run_bench
from lidarpost.confidence import (
    Detection,
    RectifyConfig,
    decode_iou_target,
    encode_iou_target,
    pearson,
    rectify,
    rectify_all,
)
from lidarpost.dinms import DiNmsConfig, di_nms
from lidarpost.evaluation import EvalConfig, FrameData, ScoredBox, compute_ap, evaluate, match_frame
from lidarpost.geometry import Box3D, bev_iou, normalize_angle, rotate_z
from lidarpost.kitti import Difficulty, LabeledBox
from lidarpost.losses import direction_ce, focal_loss, iou_loss, smooth_l1, total_loss
from lidarpost.synth import SynthConfig, generate_scene, simulate_detector
from oracles import dinms_literal
from oracles.pr_bruteforce import brute_force_ap, random_dataset

DATA = Path(__file__).parent / "data"
ANCHORS = generate_anchors()
README = Path(__file__).resolve().parent.parent / "README.md"


def test_01_dinms_oracle_equivalence(criterion):
    cfg = DiNmsConfig(score_threshold=None)
    instances = list(dinms_literal.load())
    prepared = []
    for inst in instances:
        dets = [
            Detection(Box3D(*b), float(c), float(i), int(a), float(c))
            for b, c, i, a in zip(inst["boxes"], inst["conf"], inst["iou_pred"], inst["anchor_index"])
        ]
        prepared.append(dets)
    di_nms(prepared[0], ANCHORS, cfg)  # compile outside the timed loop
    t0 = time.perf_counter()
    results = [di_nms(d, ANCHORS, cfg) for d in prepared]
    elapsed = time.perf_counter() - t0

    decisions_ok = True
    max_err = 0.0
    n_max = 0
    for inst, res in zip(instances, results):
        n_max = max(n_max, len(inst["boxes"]))
        if [c.candidate for c in res.clusters] != inst["cand"].tolist() or [
            c.kept for c in res.clusters
        ] != inst["kept"].tolist():
            decisions_ok = False
            continue
        fused = np.array([c.box.to_array() for c in res.clusters])
        err = np.abs(fused - inst["fused"])
        err[:, 6] = np.abs(normalize_angle(fused[:, 6] - inst["fused"][:, 6]))
        max_err = max(max_err, float(err.max()))
    ok = len(instances) == 1000 and n_max <= 50 and decisions_ok and max_err <= 1e-9 and elapsed < 10.0
    criterion(1, "DI-NMS matches literal oracle on 1000 instances", ok,
              f"decisions identical={decisions_ok}, max field error {max_err:.2e}, {elapsed:.2f} s")


def test_02_zero_iou_fp_filter(criterion):
    car = Box3D(15.0, 3.0, -0.8, 1.6, 3.9, 1.56, 0.2)
    idx = ANCHORS.nearest(car.x, car.y, car.r)
    lone = di_nms([Detection(car, 0.9, 1.0, idx, 0.9)], ANCHORS)
    triple = di_nms([Detection(car, 0.9, 0.9, idx, 0.9)] * 3, ANCHORS)
    ok = (
        lone.clusters[0].cnt == 1.0
        and len(lone) == 0
        and len(triple) == 1
        and abs(triple.kept[0].cnt - 2.7) < 1e-12
        and triple.boxes[0] == car
    )
    criterion(2, "lone box suppressed (cnt 1), triple fused (cnt 2.7)", ok,
              f"lone cnt {lone.clusters[0].cnt}, triple cnt {triple.clusters[0].cnt!r}")


def test_03_bev_iou_monte_carlo(criterion):
    z = np.load(DATA / "mc_bev_iou.npz")
    A = [Box3D(*a) for a in z["boxes_a"]]
    B = [Box3D(*b) for b in z["boxes_b"]]
    ours = np.array([bev_iou(a, b) for a, b in zip(A, B)])
    mc_err = float(np.max(np.abs(ours - z["iou"])))
    sym = max(abs(bev_iou(a, b) - bev_iou(b, a)) for a, b in zip(A, B))
    rng = np.random.default_rng(31)
    rigid = 0.0
    for a, b in zip(A, B):
        th, tx, ty = rng.uniform(-math.pi, math.pi), rng.uniform(-50, 50), rng.uniform(-50, 50)

        def move(box):
            x, y = rotate_z(np.array([box.x, box.y]), th)
            return Box3D(x + tx, y + ty, box.z, box.w, box.l, box.h, box.r + th)

        rigid = max(rigid, abs(bev_iou(move(a), move(b)) - bev_iou(a, b)))
    ok = len(A) == 1000 and int(z["n_samples"]) >= 10**7 and mc_err <= 2e-3 and sym <= 1e-9 and rigid <= 1e-9
    criterion(3, "rotated BEV IoU vs Monte Carlo, symmetry, rigid invariance", ok,
              f"MC error {mc_err:.2e}, symmetry {sym:.1e}, rigid {rigid:.1e}")


def test_04_round_trips(criterion):
    rng = np.random.default_rng(4)
    n = 10_000
    a = np.column_stack([rng.uniform(0, 70, n), rng.uniform(-40, 40, n), rng.uniform(-3, 1, n),
                         rng.uniform(0.5, 5, (n, 3)), rng.uniform(-math.pi, math.pi, n)])
    g = np.column_stack([a[:, :3] + rng.normal(0, 2, (n, 3)), a[:, 3:6] * rng.uniform(0.3, 3, (n, 3)),
                         rng.uniform(-math.pi, math.pi, n)])
    back = decode_boxes(a, encode_boxes(a, g))
    box_err = max(float(np.max(np.abs(back[:, :6] - g[:, :6]))),
                  float(np.max(np.abs(normalize_angle(back[:, 6] - g[:, 6])))))
    x = rng.uniform(0, 1, n)
    iou_err = float(np.max(np.abs(decode_iou_target(encode_iou_target(x)) - x)))
    ends = (encode_iou_target(0.0), encode_iou_target(0.5), encode_iou_target(1.0))
    ok = box_err <= 1e-12 and iou_err <= 1e-12 and ends == (-1.0, 0.0, 1.0)
    criterion(4, "residual and IoU-target round trips over 1e4 cases", ok,
              f"box {box_err:.1e}, iou {iou_err:.1e}, endpoints {ends}")


def test_05_confidence_function(criterion):
    grid = np.linspace(0.0, 1.0, 100)
    arith = 0.0
    monotone = True
    reduces = True
    for c in grid:
        for i in grid:
            for b in (0.5, 1.0, 2.0, 4.0):
                arith = max(arith, abs(rectify(c, i, b) - c * i**b))
            reduces &= rectify(c, i, 0.0) == c and rectify(c, 1.0, 4.0) == c
            if i < 1:
                fs = [rectify(c, i, b) for b in (0.0, 0.5, 1.0, 2.0, 4.0, 8.0)]
                monotone &= all(f2 <= f1 for f1, f2 in zip(fs, fs[1:]))
    hand = abs(rectify(0.8, 0.9, 4.0) - 0.52488)
    ok = arith <= 1e-15 and hand <= 1e-15 and monotone and reduces
    criterion(5, "confidence c*i^beta, identities, monotone suppression on 100x100 grid", ok,
              f"max error {max(arith, hand):.1e}")


def _frames(data):
    return {
        f"{k:06d}": FrameData(
            [ScoredBox(Box3D(*b), c, n) for c, b, n in dets],
            [LabeledBox(Box3D(*b), n, Difficulty(d)) for b, n, d in gts],
        )
        for k, (dets, gts) in enumerate(data)
    }


def test_06_evaluator_vs_bruteforce(criterion):
    rng = np.random.default_rng(606)
    worst = 0.0
    compared = 0
    for _ in range(50):
        data = random_dataset(rng, max_frames=20, max_objects=10)
        frames = _frames(data)
        for rp in (11, 40):
            rep = evaluate(frames, EvalConfig(recall_points=rp))
            for lvl in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD):
                try:
                    expect = brute_force_ap(data, int(lvl), 0.7, rp)
                except ValueError:
                    worst = max(worst, 0.0 if rep.reports[lvl] is None else math.inf)
                    continue
                worst = max(worst, abs(rep.ap(lvl) - expect))
                compared += 1
    car = Box3D(20, 2, -0.9, 1.6, 3.9, 1.56, 0.3)
    perfect = [
        compute_ap([match_frame([ScoredBox(car, 1.0)], [LabeledBox(car, "Car")])], EvalConfig(recall_points=rp)).ap
        for rp in (11, 40)
    ]
    ok = worst <= 1e-9 and compared > 0 and perfect == [100.0, 100.0]
    criterion(6, "AP matches brute-force PR enumeration on 50 datasets", ok,
              f"{compared} AP values, max deviation {worst:.1e}, perfect detector {perfect}")


def _pcc(scale):
    cfg = SynthConfig(noise_scale=scale, points_base=0.0, fp_rate=0.0)
    real, pred, seed = [], [], 0
    while len(real) < 10_000:
        scene = generate_scene(cfg, seed)
        for d in simulate_detector(scene, ANCHORS, cfg, seed):
            real.append(d.real_iou)
            pred.append(d.iou_pred)
        seed += 1
    return pearson(real, pred)


def test_07_end_to_end_synthetic(criterion):
    cfg = SynthConfig.noiseless(duplicates=(4, 4), fixed_iou_pred=1.0, points_base=0.0)
    frames = {}
    for seed in range(100):
        scene = generate_scene(cfg, seed)
        dets = rectify_all(simulate_detector(scene, ANCHORS, cfg, seed), RectifyConfig(4.0))
        frames[scene.frame_id] = FrameData(di_nms(dets, ANCHORS).detections(), scene.gts)
    aps = {}
    for rp in (11, 40):
        rep = evaluate(frames, EvalConfig(recall_points=rp))
        for lvl, r in rep.reports.items():
            aps[(rp, lvl.label)] = None if r is None else r.ap
    pccs = [_pcc(s) for s in (0.5, 1.0, 2.0)]
    ok = all(v == 100.0 for v in aps.values()) and pccs[0] > pccs[1] > pccs[2]
    criterion(7, "noiseless chain gives AP 100 everywhere; PCC falls with noise", ok,
              f"AP {sorted(set(aps.values()))}, PCC {[round(p, 4) for p in pccs]}")


def test_08_losses(criterion):
    checks = [
        (focal_loss(0.5, 1), 0.25 * 0.25 * math.log(2)),
        (smooth_l1(0.0), 0.0),
        (smooth_l1(0.5), 0.125),
        (smooth_l1(2.0), 1.5),
        (direction_ce([0.0, 0.0], 0), math.log(2)),
        (direction_ce([10.0, -10.0], 0), math.log1p(math.exp(-20.0))),
        (direction_ce([-10.0, 10.0], 0), 20.0 + math.log1p(math.exp(-20.0))),
        (iou_loss(0.3, 0.3), 0.0),
        (iou_loss(0.8, 0.3), 0.125),
        (total_loss(0, 0, 0, 0), 0.0),
    ]
    err = max(abs(a - b) for a, b in checks)
    total = total_loss(1, 1, 1, 1)
    ok = err <= 1e-12 and abs(total - 4.2) <= 1e-12
    criterion(8, "loss hand values; weighted total of ones is 4.2", ok, f"max error {err:.1e}, total {total!r}")


def test_09_performance_budget(criterion):
    res = run_bench(n_objects=100, duplicates=5, runs=5)
    ok = res["n_boxes"] == 500 and res["n_runs"] == 5 and res["mean_ms"] < 10.0
    criterion(9, "rectify + DI-NMS on 500 boxes under 10 ms (5-run mean)", ok,
              f"mean {res['mean_ms']:.2f} ms, p95 {res['p95_ms']:.2f} ms")


def test_10_non_reproducible_values_stated(criterion):
    text = README.read_text() if README.exists() else ""
    ok = "80.28" in text and "0.511" in text and "not reproduc" in text.lower()
    criterion(10, "published AP and PCC values declared non-reproducible in README", ok,
              "needs the trained network and KITTI training data")
