import filecmp
import json
import math

import numpy as np
import pytest

from lidarpost.cli import main, run_bench
from lidarpost.config import PipelineConfig, deep_merge, load_config, parse_override
from lidarpost.confidence import Detection
from lidarpost.geometry import Box3D
from lidarpost.anchors import generate_anchors
from lidarpost.synth import read_detections, write_detections
from lidarpost.voxelizer import ConfigError, save_velodyne

CAR = Box3D(15.0, 3.0, -0.8, 1.6, 3.9, 1.56, 0.2)


def lone_box_file(tmp_path):
    a = generate_anchors()
    path = tmp_path / "lone.jsonl"
    write_detections(path, [Detection(CAR, 0.9, 1.0, a.nearest(CAR.x, CAR.y, CAR.r))])
    return path


def cli_json(capsys, *argv):
    assert main(list(argv)) == 0
    return json.loads(capsys.readouterr().out)


# -- config ------------------------------------------------------------------


def test_defaults_round_trip():
    cfg = PipelineConfig()
    assert PipelineConfig.from_dict(json.loads(cfg.to_json())) == cfg
    d = cfg.to_dict()
    assert d["rectify"]["beta"] == 4.0
    assert d["dinms"]["cnt_thres"] == 2.6
    assert d["anchor"]["pos_threshold"] == 0.6 and d["anchor"]["neg_threshold"] == 0.45


def test_override_parsing_and_merge():
    assert parse_override("dinms.cnt_thres=3") == ("dinms.cnt_thres", 3)
    assert parse_override("eval.class_name=Car") == ("eval.class_name", "Car")
    assert deep_merge({"a": {"b": 1, "c": 2}}, {"a": {"b": 5}}) == {"a": {"b": 5, "c": 2}}
    with pytest.raises(ConfigError):
        parse_override("nothing")


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"bogus": {}})
    with pytest.raises(ConfigError):
        load_config(overrides={"rectify.beta": -1})
    with pytest.raises(ConfigError):
        load_config(overrides={"rectify.gamma": 1})
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_precedence(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"rectify": {"beta": 2.0}, "dinms": {"cnt_thres": 3.0}}))
    cfg = cli_json(capsys, "--print-config")
    assert cfg["rectify"]["beta"] == 4.0
    cfg = cli_json(capsys, "--config", str(path), "--print-config")
    assert cfg["rectify"]["beta"] == 2.0 and cfg["dinms"]["cnt_thres"] == 3.0
    cfg = cli_json(capsys, "nms", "x", "-o", "y", "--config", str(path), "--beta", "1.5", "--print-config")
    assert cfg["rectify"]["beta"] == 1.5 and cfg["dinms"]["cnt_thres"] == 3.0
    cfg = cli_json(capsys, "--config", str(path), "--set", "dinms.cnt_thres=1.0", "--print-config")
    assert cfg["dinms"]["cnt_thres"] == 1.0


# -- exit codes --------------------------------------------------------------


def test_usage_errors_exit_1(tmp_path, capsys):
    assert main([]) == 1
    with pytest.raises(SystemExit) as e:
        main(["nms"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        main(["evaluate", "--recall-points", "12", "--dets", "a", "--gts", "b", "--calib", "c"])
    assert e.value.code == 1
    assert main(["--set", "rectify.beta=-2", "--print-config"]) == 1
    assert main(["bench", "--runs", "0"]) == 1


def test_data_errors_exit_2(tmp_path, capsys):
    assert main(["nms", str(tmp_path / "missing.jsonl"), "-o", str(tmp_path / "o.jsonl")]) == 2
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json}\n")
    assert main(["nms", str(bad), "-o", str(tmp_path / "o.jsonl")]) == 2
    assert "data error" in capsys.readouterr().err
    for sub in ("d", "g", "c"):
        (tmp_path / sub).mkdir()
    (tmp_path / "g" / "000000.txt").write_text("")
    assert main(["evaluate", "--dets", str(tmp_path / "d"), "--gts", str(tmp_path / "g"), "--calib", str(tmp_path / "c")]) == 2


# -- nms ---------------------------------------------------------------------


def test_nms_lone_box(tmp_path, capsys):
    src = lone_box_file(tmp_path)
    assert main(["nms", str(src), "-o", str(tmp_path / "di.jsonl")]) == 0
    assert read_detections(tmp_path / "di.jsonl") == []
    assert main(["nms", str(src), "-o", str(tmp_path / "std.jsonl"), "--method", "standard"]) == 0
    (kept,) = read_detections(tmp_path / "std.jsonl")
    assert kept.box == CAR
    assert kept.confidence == pytest.approx(0.9)
    assert "kept 0 of 1" in capsys.readouterr().out


def test_nms_empty_input(tmp_path):
    src = tmp_path / "empty.jsonl"
    src.write_text("")
    assert main(["nms", str(src), "-o", str(tmp_path / "o.jsonl")]) == 0
    assert (tmp_path / "o.jsonl").read_text() == ""


def test_beta_flag_matches_config_file(tmp_path):
    a = generate_anchors()
    dets = [Detection(CAR, 0.8, 0.9, a.nearest(CAR.x, CAR.y, CAR.r)) for _ in range(3)]
    src = tmp_path / "d.jsonl"
    write_detections(src, dets)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"rectify": {"beta": 2.0}}))
    assert main(["nms", str(src), "-o", str(tmp_path / "a.jsonl"), "--beta", "2"]) == 0
    assert main(["nms", str(src), "-o", str(tmp_path / "b.jsonl"), "--config", str(cfg)]) == 0
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
    (out,) = read_detections(tmp_path / "a.jsonl")
    assert out.confidence == pytest.approx(0.8 * 0.81)


def test_nms_diagnostics(tmp_path):
    src = lone_box_file(tmp_path)
    diag = tmp_path / "diag.jsonl"
    assert main(["nms", str(src), "-o", str(tmp_path / "o.jsonl"), "--diagnostics", str(diag)]) == 0
    (row,) = [json.loads(x) for x in diag.read_text().splitlines()]
    assert row["cnt"] == 1.0 and row["kept"] is False


# -- synth / evaluate pipeline -----------------------------------------------


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", str(tmp_path / name), "--frames", "3", "--seed", "7", "--threads", "2"]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    for sub in ("velodyne", "label_2", "calib", "detections"):
        c = filecmp.dircmp(tmp_path / "a" / sub, tmp_path / "b" / sub)
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / sub, tmp_path / "b" / sub, c.common_files, shallow=False)
        assert c.common_files and not mismatch and not errors
    assert not cmp.left_only and not cmp.right_only


def test_noiseless_pipeline_end_to_end(tmp_path, capsys):
    root = tmp_path / "data"
    assert main(["synth", str(root), "--frames", "6", "--noiseless",
                 "--set", "synth.duplicates=[4,4]", "--set", "synth.fixed_iou_pred=1.0"]) == 0
    assert main(["nms", str(root / "detections"), "-o", str(tmp_path / "pred"), "--format", "kitti",
                 "--calib", str(root / "calib")]) == 0
    report = tmp_path / "r.json"
    capsys.readouterr()
    assert main(["evaluate", "--dets", str(tmp_path / "pred"), "--gts", str(root / "label_2"),
                 "--calib", str(root / "calib"), "--recall-points", "11", "--json", str(report),
                 "--pr-csv", str(tmp_path / "pr.csv")]) == 0
    doc = json.loads(report.read_text())
    aps = [v["ap"] for v in doc["results"].values() if v is not None]
    assert aps and all(ap == 100.0 for ap in aps)
    assert "100.0000" in capsys.readouterr().out
    assert (tmp_path / "pr.csv").read_text().startswith("threshold,recall,precision")


def test_evaluate_no_detections(tmp_path, capsys):
    root = tmp_path / "data"
    assert main(["synth", str(root), "--frames", "2", "--no-detections"]) == 0
    (tmp_path / "pred").mkdir()
    for f in (root / "label_2").iterdir():
        (tmp_path / "pred" / f.name).write_text("")
    out = tmp_path / "r.json"
    assert main(["evaluate", "--dets", str(tmp_path / "pred"), "--gts", str(root / "label_2"),
                 "--calib", str(root / "calib"), "--json", str(out)]) == 0
    aps = [v["ap"] for v in json.loads(out.read_text())["results"].values() if v is not None]
    assert aps and all(ap == 0.0 for ap in aps)


def test_beta_sweep_command(tmp_path, capsys):
    root = tmp_path / "data"
    assert main(["synth", str(root), "--frames", "1"]) == 0
    src = next((root / "detections").iterdir())
    capsys.readouterr()
    assert main(["beta-sweep", str(src), "--betas", "0,4"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "beta\tpcc\tn" and len(lines) == 3
    assert main(["beta-sweep", str(src), "--betas", "a,b"]) == 1


# -- voxelize / augment / bench ----------------------------------------------


def test_voxelize_single_point(tmp_path, capsys):
    path = tmp_path / "p.bin"
    save_velodyne(path, np.array([[10.0, 0.0, -1.0, 0.5]]))
    out = tmp_path / "v.npz"
    assert main(["voxelize", str(path), "-o", str(out)]) == 0
    assert capsys.readouterr().out.startswith("1 voxels")
    z = np.load(out)
    assert z["coords"].shape[0] == 1 and z["counts"].tolist() == [1]


def test_augment_command(tmp_path):
    root = tmp_path / "data"
    assert main(["synth", str(root), "--frames", "2", "--no-detections"]) == 0
    scenes = sorted(str(p) for p in (root / "scenes").iterdir())
    assert main(["augment", *scenes, "-o", str(tmp_path / "db"), "--build-db"]) == 0
    assert (tmp_path / "db" / "index.json").exists()
    for name in ("a1", "a2"):
        assert main(["augment", *scenes, "-o", str(tmp_path / name), "--db", str(tmp_path / "db"), "--seed", "3"]) == 0
    for p in (tmp_path / "a1").glob("*.json"):
        assert p.read_text() == (tmp_path / "a2" / p.name).read_text()
        assert p.with_suffix(".bin").read_bytes() == (tmp_path / "a2" / p.name).with_suffix(".bin").read_bytes()
    assert main(["augment", *scenes, "-o", str(tmp_path / "x"), "--ops", "gt"]) == 1
    assert main(["augment", *scenes, "-o", str(tmp_path / "x"), "--ops", "twist"]) == 1


def test_bench_schema(capsys):
    res = cli_json(capsys, "bench", "--objects", "20", "--duplicates", "5", "--runs", "5")
    assert set(res) >= {"mean_ms", "p95_ms", "n_runs"}
    assert res["n_runs"] == 5 and res["n_boxes"] == 100
    assert math.isfinite(res["mean_ms"]) and res["p95_ms"] >= min(res["runs_ms"])
    assert run_bench(n_objects=2, duplicates=3, runs=1)["n_boxes"] == 6
