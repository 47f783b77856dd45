import csv
import io
import subprocess
import sys

import numpy as np
import pytest

from gla.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main, parse_frames
from gla.config import ExperimentConfig, parse_config_text
from gla.detection import BoxSet
from gla.experiment import (
    Detector,
    TrainingError,
    batch_schedule,
    cmd_ablate,
    evaluate_detections,
    file_digest,
    load_detector,
    suite_arms,
)
from gla.heatmap import read_ppm
from gla.serialize import load_checkpoint, load_tensor
from gla.weather import DAYTIMES, WEATHERS, Dataset

FAST = "steps = 3\nlr = 0.001\n"


def _cfg(tmp_path, text=FAST, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


@pytest.fixture(scope="module")
def trained(tiny_data, tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    cfg = _cfg(root)
    assert main(["train", "--config", cfg, "--data", str(tiny_data), "--out", str(root / "ck"), "--quiet"]) == EXIT_OK
    return root / "ck"


# --------------------------------------------------------------------------
# argument handling and exit codes
# --------------------------------------------------------------------------


def test_parse_frames():
    assert parse_frames("3,17, 20-22") == [3, 17, 20, 21, 22]
    for bad in ("", "a", "5-2"):
        with pytest.raises(ValueError):
            parse_frames(bad)


def test_exit_codes(tmp_path, tiny_data, capsys, monkeypatch):
    assert main([]) == EXIT_INVALID
    assert main(["--help"]) == EXIT_OK
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "ck")]) == EXIT_INVALID
    bad = _cfg(tmp_path, "lr = -1\n", "bad.cfg")
    assert main(["train", "--config", bad, "--data", str(tiny_data), "--out", str(tmp_path / "ck")]) == EXIT_INVALID
    err = capsys.readouterr().err
    assert "line 1" in err and "lr > 0" in err
    (tmp_path / "ck").mkdir()
    (tmp_path / "ck" / "config.txt").write_text(FAST)
    assert main(["eval", "--ckpt", str(tmp_path / "ck"), "--data", str(tiny_data), "--out", str(tmp_path / "r")]) == EXIT_INVALID

    def diverge(*args, **kw):
        raise TrainingError("non-finite loss at step 0")

    monkeypatch.setattr("gla.experiment.train", diverge)
    assert main(["train", "--data", str(tiny_data), "--out", str(tmp_path / "ck2")]) == EXIT_RUNTIME
    assert "runtime failure" in capsys.readouterr().err


def test_console_script_runs():
    out = subprocess.run([sys.executable, "-m", "gla.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "export-attn" in out.stdout


# --------------------------------------------------------------------------
# gen-data
# --------------------------------------------------------------------------


def test_gen_data_cells_split_and_idempotence(tmp_path):
    cfg = _cfg(tmp_path, "frames_per_cell = 5\n")
    for d in ("a", "b"):
        assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / d)]) == EXIT_OK
    ds = Dataset(tmp_path / "a")
    cells = {(i.weather, i.daytime) for i in ds.info.values()}
    assert cells == {(w, d) for w in WEATHERS for d in DAYTIMES}
    assert len(ds.indices("train")) == 32 and len(ds.indices("test")) == 8
    manifest = (tmp_path / "a" / "manifest.txt").read_text()
    assert "test_fraction = 0.2" in manifest
    for p in sorted((tmp_path / "a").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def test_zero_steps_checkpoint_equals_initialization(tmp_path, tiny_data):
    cfg = _cfg(tmp_path, "steps = 0\n")
    assert main(["train", "--config", cfg, "--data", str(tiny_data), "--out", str(tmp_path / "ck"), "--quiet"]) == EXIT_OK
    saved = load_checkpoint(tmp_path / "ck")
    init = Detector(ExperimentConfig(steps=0)).state_entries()
    assert set(saved) == {name for name, _, _ in init}
    for name, arr, kind in init:
        assert saved[name][1] == kind
        np.testing.assert_array_equal(saved[name][0], arr)
    assert (tmp_path / "ck" / "train_log.csv").read_text() == "step,total,cls,box,num_pos\n"


def test_training_log_and_checkpoint_are_byte_identical(tmp_path, tiny_data, trained):
    cfg = _cfg(tmp_path)
    assert main(["train", "--config", cfg, "--data", str(tiny_data), "--out", str(tmp_path / "ck"), "--quiet"]) == EXIT_OK
    for p in sorted(trained.iterdir()):
        if p.name != "timing.csv":
            assert file_digest(p) == file_digest(tmp_path / "ck" / p.name), p.name
    log = (trained / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,total,cls,box,num_pos" and len(log) == 4
    timing = (trained / "timing.csv").read_text().splitlines()
    assert timing[0] == "step,seconds" and len(timing) == 4


def test_checkpoint_records_config_and_dataset(trained, tiny_data):
    model, cfg = load_detector(trained)
    assert cfg.steps == 3 and cfg.lr == 0.001
    meta = (trained / "meta.txt").read_text()
    assert f"dataset_hash = {Dataset(tiny_data).content_hash()}" in meta and "steps_done = 3" in meta


def test_batch_schedule_epochs():
    sched = batch_schedule(5, 2, 5, seed=1)
    assert [len(b) for b in sched] == [2] * 5
    assert sorted(sum(sched[:2], [])) == sorted(set(sum(sched[:2], [])))
    assert batch_schedule(5, 2, 5, seed=1) == sched != batch_schedule(5, 2, 5, seed=2)


@pytest.mark.slow
def test_five_hundred_steps_reduce_loss(tmp_path, default_data):
    assert main(["train", "--config", _cfg(tmp_path, "steps = 500\n"), "--data", str(default_data), "--out", str(tmp_path / "ck"), "--quiet"]) == EXIT_OK
    rows = list(csv.DictReader(io.StringIO((tmp_path / "ck" / "train_log.csv").read_text())))
    assert len(rows) == 500
    assert float(rows[-1]["total"]) < float(rows[0]["total"])


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def test_eval_untrained_head_is_near_zero(tmp_path, tiny_data):
    cfg = _cfg(tmp_path, "steps = 0\n")
    main(["train", "--config", cfg, "--data", str(tiny_data), "--out", str(tmp_path / "ck"), "--quiet"])
    assert main(["eval", "--ckpt", str(tmp_path / "ck"), "--data", str(tiny_data), "--out", str(tmp_path / "r")]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "r" / "results.csv")))
    overall = [float(r["map"]) for r in rows if r["level"] == "Overall" and r["map"]]
    assert overall and max(overall) < 0.05


def test_eval_writes_all_cells(tmp_path, tiny_data, trained):
    assert main(["eval", "--ckpt", str(trained), "--data", str(tiny_data), "--out", str(tmp_path / "r"), "--label", "toy"]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "r" / "results.csv")))
    assert {(r["weather"], r["daytime"]) for r in rows} == {(w, d) for w in WEATHERS for d in DAYTIMES}
    assert {r["model"] for r in rows} == {"toy"}
    assert (tmp_path / "r" / "detections.txt").exists()
    first = (tmp_path / "r" / "results.txt").read_bytes()
    main(["eval", "--ckpt", str(trained), "--data", str(tiny_data), "--out", str(tmp_path / "r"), "--label", "toy"])
    assert (tmp_path / "r" / "results.txt").read_bytes() == first


def test_oracle_detections_score_one(tiny_data):
    ds = Dataset(tiny_data)
    ids = ds.indices("test")
    dets = {}
    for i in ids:
        gt = ds.ground_truth(i)
        dets[i] = BoxSet(gt.boxes, gt.classes, np.ones(len(gt)))
    res = evaluate_detections(dets, ds, ids, ExperimentConfig())
    assert res.map() == 1.0


# --------------------------------------------------------------------------
# ablate
# --------------------------------------------------------------------------


def test_suite_arm_sets():
    base = ExperimentConfig()
    assert [c.partition_rows * c.partition_cols for _, c in suite_arms("partitions", base)] == [18, 32, 50, 72]
    assert [label for label, _ in suite_arms("attention-mode", base)] == ["Global Attention only", "Local Attention only", "GLA"]
    assert len(suite_arms("baselines", base)) == 7
    assert all(c.seed == base.seed and c.steps == base.steps for _, c in suite_arms("baselines", base))
    with pytest.raises(ValueError):
        suite_arms("everything", base)


def test_partition_suite_table(tmp_path, tiny_data):
    cfg = _cfg(tmp_path, "steps = 1\nlr = 0.001\n")
    assert main(["ablate", "--suite", "partitions", "--config", cfg, "--data", str(tiny_data), "--out", str(tmp_path / "ab")]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "ab" / "results.csv")))
    labels = list(dict.fromkeys(r["model"] for r in rows))
    assert labels == ["18 partitions", "32 partitions", "50 partitions", "72 partitions"]
    dhash = Dataset(tiny_data).content_hash()[:12]
    assert {r["dataset"] for r in rows} == {dhash}
    assert all(r["status"] == "ok" for r in rows)
    table = (tmp_path / "ab" / "results.txt").read_text().splitlines()
    assert sum(line.startswith("| 18 partitions") for line in table) == 2


def test_failed_arm_is_marked_not_fatal(tmp_path, tiny_data):
    base = ExperimentConfig(steps=1, lr=1e-3)
    arms = [("ok", base), ("broken", base.replace(image_height=30))]  # shape mismatch with the data
    txt, runs, errors = cmd_ablate("attention-mode", base, tiny_data, tmp_path, arms=arms)
    assert runs["ok"] is not None and runs["broken"] is None
    assert set(errors) == {"broken"}
    assert "broken (failed)" in txt and (tmp_path / "errors.txt").exists()


# --------------------------------------------------------------------------
# export-attn
# --------------------------------------------------------------------------


def test_export_attn_files_blocks_and_determinism(tmp_path, tiny_data, trained):
    frame = str(Dataset(tiny_data).indices("test")[0])
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        assert main(["export-attn", "--ckpt", str(trained), "--data", str(tiny_data), "--frames", frame, "--out", str(out)]) == EXIT_OK
    maps = sorted(p.name for p in out_a.glob("*.ppm"))
    assert len(maps) == 6
    assert {m.split("_")[1] for m in maps} == {"local", "global"}
    for name in sorted(p.name for p in out_a.iterdir()):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    for m in ("camera", "gated", "lidar"):
        img = read_ppm(out_a / f"attn_global_{m}_{int(frame):05d}.ppm")
        assert img.shape == (60, 120, 3)
        blocks = img.reshape(5, 12, 10, 12, 3)
        assert (blocks == blocks[:, :1, :, :1]).all()  # constant 12x12 block per partition
        w = load_tensor(out_a / f"attn_global_{m}_{int(frame):05d}.glat")
        assert w.shape[-2:] == (5, 10)


def test_export_attn_rejects_unknown_frame(tmp_path, tiny_data, trained):
    assert main(["export-attn", "--ckpt", str(trained), "--data", str(tiny_data), "--frames", "9999", "--out", str(tmp_path)]) == EXIT_INVALID


def test_config_round_trip_through_checkpoint(trained):
    text = (trained / "config.txt").read_text()
    assert parse_config_text(text) == load_detector(trained)[1]
