import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from cpdsense import pipeline
from cpdsense.channel import Label, ScenarioConfig, synth_csi
from cpdsense.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from cpdsense.io import file_sha256, read_manifest, save_checkpoint, write_recording

import e2e_support as e2e

TINY = {
    "seed": 3,
    "data": {"train_count": 30, "val_count": 9, "test_count": 12, "pretrain_count": 15, "subcarriers_per_link": 4,
             "sample_rate_hz": 10.0, "duration_s": 12.0, "windows_per_recording": 3},
    "features": {"num_lags": 20},
    "model": {"num_heads": 2, "decomp_kernel": 5, "head_hidden": [16, 8]},
    "train": {"epochs": 3, "batch_size": 16},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["gen", "--config", str(cfg), "--out", str(root / "data")]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--stage", "1",
                 "--out", str(root / "r1")]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--stage", "2",
                 "--stage1-checkpoint", str(root / "r1" / "best.ckpt"), "--out", str(root / "r2")]) == EXIT_OK
    return root


def run_eval(work, out, window=15):
    return main(["eval", "--checkpoint", str(work / "r2" / "best.ckpt"), "--data", str(work / "data"),
                 "--out", str(out), "--window", str(window)])


# -- gen ---------------------------------------------------------------------------


def test_gen_layout(work):
    data = work / "data"
    for name in ("train", "val", "test", "pretrain"):
        assert (data / "features" / f"{name}.acf").exists()
    entries = read_manifest(data / "manifest.json")
    assert len(entries) == 30 + 9 + 12 + 15
    assert all((data / e["path"]).exists() for e in entries)


def test_gen_is_deterministic(work, tmp_path):
    cfg = work / "tiny.yaml"
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "again")]) == EXIT_OK
    for rel in ("manifest.json", "features/train.acf", "features/test.acf", "recordings/val_00002.csi"):
        assert file_sha256(tmp_path / "again" / rel) == file_sha256(work / "data" / rel)


def test_gen_classes_balanced(work):
    entries = read_manifest(work / "data" / "manifest.json")
    for split in ("train", "val", "test"):
        counts = [sum(e["split"] == split and e["label"] == lab.name for e in entries) for lab in Label]
        assert max(counts) - min(counts) <= 1


def test_manifest_test_geometry_disjoint(work):
    entries = read_manifest(work / "data" / "manifest.json")
    train = [e for e in entries if e["split"] in ("train", "val")]
    test = [e for e in entries if e["split"] == "test"]
    assert max(e["static_paths"][1] for e in train) < min(e["static_paths"][0] for e in test)
    assert max(e["static_delay_ns"][1] for e in train) < min(e["static_delay_ns"][1] for e in test)


def test_snapshot_matches_resolved_config(work):
    expected = pipeline.resolve_config(TINY)
    for d in ("data", "r1", "r2"):
        assert json.loads((work / d / "config.json").read_text()) == json.loads(json.dumps(expected))


def test_seed_and_set_overrides(work, tmp_path):
    out = tmp_path / "g"
    assert main(["gen", "--config", str(work / "tiny.yaml"), "--seed", "9", "--set", "data.test_count=3",
                 "--count", "6", "--out", str(out)]) == EXIT_OK
    snap = json.loads((out / "config.json").read_text())
    assert snap["seed"] == 9 and snap["train"]["seed"] == 9
    assert snap["data"]["test_count"] == 3 and snap["data"]["train_count"] == 6


# -- usage and data errors -------------------------------------------------------------


def test_usage_errors(work, tmp_path):
    data = str(work / "data")
    assert main(["train", "--data", data, "--stage", "2", "--out", str(tmp_path / "x")]) == EXIT_USAGE
    assert main(["gen", "--out", str(tmp_path / "x"), "--set", "nodots=1"]) == EXIT_USAGE
    assert main(["gen", "--out", str(tmp_path / "x"), "--set", "model.bogus=1"]) == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["train", "--stage", "5"])
    assert info.value.code == EXIT_USAGE


def test_missing_data_is_a_data_error(tmp_path):
    assert main(["train", "--data", str(tmp_path), "--stage", "1", "--out", str(tmp_path / "r")]) == EXIT_DATA


def test_dimension_mismatch_is_a_data_error(work, tmp_path):
    code = main(["train", "--config", str(work / "tiny.yaml"), "--set", "features.num_lags=30",
                 "--data", str(work / "data"), "--stage", "1", "--out", str(tmp_path / "r")])
    assert code == EXIT_DATA


def test_stage1_checkpoint_cannot_be_evaluated(work, tmp_path):
    code = main(["eval", "--checkpoint", str(work / "r1" / "best.ckpt"), "--data", str(work / "data"),
                 "--out", str(tmp_path)])
    assert code == EXIT_DATA


def test_module_entry_point_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cpdsense", "train", "--data", str(tmp_path), "--stage", "2",
                           "--out", str(tmp_path / "r")], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    assert "stage1-checkpoint" in proc.stderr


# -- train / eval / infer ---------------------------------------------------------------------


def test_train_outputs(work):
    for d in ("r1", "r2"):
        rows = (work / d / "metrics.csv").read_text().splitlines()
        assert rows[0] == "epoch,train_loss,val_loss,val_accuracy" and len(rows) == 4
        assert (work / d / "best.ckpt").exists() and (work / d / "final.ckpt").exists()


def test_eval_report_and_determinism(work, tmp_path):
    assert run_eval(work, tmp_path / "a") == EXIT_OK
    assert run_eval(work, tmp_path / "b") == EXIT_OK
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["num_samples"] == 12 * 3 and report["smoothing_window"] == 15
    assert report["flips_smoothed"] <= report["flips_unsmoothed"]
    for name in ("report.json", "smoothed_metrics.json", "unsmoothed_confusion.csv", "smoothed_roc.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    snap = json.loads((tmp_path / "a" / "config.json").read_text())
    assert snap["smoothing_window"] == 15 and snap["split"] == "test"


def test_eval_window_one_matches_unsmoothed(work, tmp_path):
    assert run_eval(work, tmp_path, window=1) == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["smoothed"] == report["unsmoothed"]
    assert report["flips_smoothed"] == report["flips_unsmoothed"]


def test_infer_rows(work, tmp_path, capsys):
    rec = work / "data" / "recordings" / "test_00001.csi"
    assert main(["infer", "--checkpoint", str(work / "r2" / "best.ckpt"), "--recording", str(rec)]) == EXIT_OK
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0] == ["window_start_s", "p_empty", "p_adult", "p_child", "decision"]
    assert [float(r[0]) for r in rows[1:]] == [0.0, 1.0, 2.0]
    for r in rows[1:]:
        assert abs(sum(float(v) for v in r[1:4]) - 1.0) < 1e-5
        assert r[4] in {lab.name for lab in Label}
    out = tmp_path / "p.csv"
    assert main(["infer", "--checkpoint", str(work / "r2" / "best.ckpt"), "--recording", str(rec),
                 "--out", str(out)]) == EXIT_OK
    assert list(csv.reader(out.read_text().splitlines())) == rows


def test_infer_short_recording(work, tmp_path):
    cfg = ScenarioConfig(class_label=Label.EMPTY, dynamic_paths=(0, 0), num_subcarriers_per_link=4,
                         sample_rate_hz=10.0, duration_s=6.0, rng_seed=1)
    write_recording(tmp_path / "short.csi", synth_csi(cfg, min_duration_s=5.0))
    code = main(["infer", "--checkpoint", str(work / "r2" / "best.ckpt"), "--recording", str(tmp_path / "short.csi")])
    assert code == EXIT_DATA


# -- converged-model behaviour (shares the cached toy runs) ---------------------------------------


@pytest.mark.slow
def test_train_accuracy_not_below_val():
    res = e2e.run_variant(0, "full")["result"]
    splits = e2e.toy_splits(0)
    train = e2e.test_metrics(res, splits["train"]).accuracy
    val = e2e.test_metrics(res, splits["val"]).accuracy
    assert train >= val


@pytest.mark.slow
def test_empty_recording_mostly_empty(tmp_path, capsys):
    res = e2e.run_variant(0, "full")["result"]
    cfg = e2e.toy_config(0)
    save_checkpoint(tmp_path / "m.ckpt", res.best_params, res.model_config, {"features": cfg["features"]})
    scen = ScenarioConfig(class_label=Label.EMPTY, dynamic_paths=(0, 0), num_subcarriers_per_link=8,
                          sample_rate_hz=10.0, duration_s=40.0, rng_seed=11)
    write_recording(tmp_path / "empty.csi", synth_csi(scen))
    code = main(["infer", "--checkpoint", str(tmp_path / "m.ckpt"), "--recording", str(tmp_path / "empty.csi")])
    assert code == EXIT_OK
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))[1:]
    assert len(rows) == 31
    assert np.mean([r[4] == "EMPTY" for r in rows]) >= 0.9
