"""Command-line interface: subcommands, artifacts, manifests, exit codes."""

import json

import pytest

import cardioseg as cs
from cardioseg.cli import main
from cardioseg.metrics import CSV_COLUMNS, read_metrics_csv

CONFIG = """
members:
  - {base_channels: 4, depth_levels: 2, bottleneck_channels: 8, dropout_p: 0.25, seed: 1}
  - {base_channels: 4, depth_levels: 2, bottleneck_channels: 8, dropout_p: 0.25, seed: 2}
ensemble:
  mode: uncertainty
train:
  learning_rate: 1e-3
  epochs: 2
  batch_frames: 2
  seed: 0
phantom:
  depth_range: [3, 3]
  image_size: [16, 16]
  noise_sigma: 0.05
  taper: 0.6
  seed: 5
"""


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """One generated+trained workspace shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "exp.yaml"
    cfg.write_text(CONFIG)
    assert main(["generate", "--spec", str(cfg), "--count", "4",
                 "--out", str(root / "train")]) == 0
    assert main(["generate", "--spec", str(cfg), "--count", "2", "--seed", "9",
                 "--out", str(root / "test")]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "train"),
                 "--out", str(root / "run")]) == 0
    return {"root": root, "cfg": cfg, "train": root / "train",
            "test": root / "test", "run": root / "run"}


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def test_generate_artifacts(ws):
    index = ws["train"] / "index.json"
    assert index.exists()
    entries = json.loads(index.read_text())["entries"]
    assert len(entries) == 4
    for e in entries:
        assert (ws["train"] / e["file"]).exists()
        assert e["has_mask"] is True
        assert e["depth"] == 3


def test_generate_manifest(ws):
    manifest = json.loads((ws["train"] / "run_manifest.json").read_text())
    assert manifest["command"] == "generate"
    assert manifest["seed"] == 5
    assert len(manifest["input_hash"]) == 64
    assert any(p.endswith("index.json") for p in manifest["outputs"])


def test_generate_seed_override_changes_data(ws):
    a = next(ws["train"].glob("*.pvol")).name
    assert not (ws["test"] / a).exists()  # different seed -> different frame ids


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_artifacts(ws):
    assert (ws["run"] / "final.ckpt").exists()
    loss_lines = (ws["run"] / "loss.csv").read_text().splitlines()
    assert loss_lines[0] == "member,epoch,steps,mean_loss"
    rows = [line.split(",") for line in loss_lines[1:]]
    assert len(rows) == 2  # one row per epoch
    assert all(r[0] == "-1" for r in rows)  # joint training
    assert [r[1] for r in rows] == ["0", "1"]
    manifest = json.loads((ws["run"] / "run_manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["seed"] == 0


def test_train_checkpoint_every(ws, tmp_path):
    rc = main(["train", "--config", str(ws["cfg"]), "--data", str(ws["train"]),
               "--out", str(tmp_path), "--checkpoint-every", "1"])
    assert rc == 0
    assert (tmp_path / "epoch_0001.ckpt").exists()
    assert (tmp_path / "epoch_0002.ckpt").exists()
    assert (tmp_path / "final.ckpt").exists()
    # the last periodic checkpoint equals the final state
    assert (tmp_path / "epoch_0002.ckpt").read_bytes() == \
        (tmp_path / "final.ckpt").read_bytes()


def test_train_resume_matches_straight(ws, tmp_path):
    four = CONFIG.replace("epochs: 2", "epochs: 4")
    cfg4 = tmp_path / "four.yaml"
    cfg4.write_text(four)
    assert main(["train", "--config", str(cfg4), "--data", str(ws["train"]),
                 "--out", str(tmp_path / "straight")]) == 0
    assert main(["train", "--config", str(cfg4), "--data", str(ws["train"]),
                 "--out", str(tmp_path / "resumed"),
                 "--resume", str(ws["run"] / "final.ckpt")]) == 0
    straight = (tmp_path / "straight" / "final.ckpt").read_bytes()
    resumed = (tmp_path / "resumed" / "final.ckpt").read_bytes()
    assert straight == resumed


def test_train_resume_member_mismatch(ws, tmp_path):
    other = CONFIG.replace("seed: 2", "seed: 3")
    cfg_other = tmp_path / "other.yaml"
    cfg_other.write_text(other)
    rc = main(["train", "--config", str(cfg_other), "--data", str(ws["train"]),
               "--out", str(tmp_path / "x"),
               "--resume", str(ws["run"] / "final.ckpt")])
    assert rc == 3


def test_train_strategy_writes_member_checkpoints(ws, tmp_path):
    text = CONFIG.replace("mode: uncertainty", "mode: stacking")
    cfg = tmp_path / "stack.yaml"
    cfg.write_text(text)
    assert main(["train", "--config", str(cfg), "--data", str(ws["train"]),
                 "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "member_0.ckpt").exists()
    assert (tmp_path / "run" / "member_1.ckpt").exists()
    lines = (tmp_path / "run" / "loss.csv").read_text().splitlines()[1:]
    members = {line.split(",")[0] for line in lines}
    assert members == {"0", "1"}


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_metrics_csv(ws, tmp_path):
    rc = main(["eval", "--checkpoint", str(ws["run"] / "final.ckpt"),
               "--config", str(ws["cfg"]), "--data", str(ws["test"]),
               "--out", str(tmp_path)])
    assert rc == 0
    rows = read_metrics_csv(tmp_path / "metrics.csv")
    assert len(rows) == 3  # two frames + aggregate
    assert rows[-1]["frame_id"] == "aggregate"
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(CSV_COLUMNS)
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["command"] == "eval"
    assert manifest["config"]["mode"] == "uncertainty"


def test_eval_single_member_mode(ws, tmp_path):
    rc = main(["eval", "--checkpoint", str(ws["run"] / "final.ckpt"),
               "--config", str(ws["cfg"]), "--data", str(ws["test"]),
               "--mode", "member:0", "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "metrics.csv").exists()


def test_eval_fixed_mode_on_uncertainty_checkpoint(ws, tmp_path):
    rc = main(["eval", "--checkpoint", str(ws["run"] / "final.ckpt"),
               "--config", str(ws["cfg"]), "--data", str(ws["test"]),
               "--mode", "fixed", "--out", str(tmp_path)])
    assert rc == 0


def test_eval_member_mismatch_exit_code(ws, tmp_path):
    other = CONFIG.replace("seed: 1", "seed: 7")
    cfg = tmp_path / "other.yaml"
    cfg.write_text(other)
    rc = main(["eval", "--checkpoint", str(ws["run"] / "final.ckpt"),
               "--config", str(cfg), "--data", str(ws["test"]),
               "--out", str(tmp_path / "o")])
    assert rc == 3


def test_eval_bad_mode_token(ws, tmp_path):
    rc = main(["eval", "--checkpoint", str(ws["run"] / "final.ckpt"),
               "--config", str(ws["cfg"]), "--data", str(ws["test"]),
               "--mode", "member:x", "--out", str(tmp_path)])
    assert rc == 2


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

def test_render_outputs(ws, tmp_path):
    rc = main(["render", "--checkpoint", str(ws["run"] / "final.ckpt"),
               "--data", str(ws["test"]), "--frame", "0",
               "--out", str(tmp_path)])
    assert rc == 0
    meta = json.loads((tmp_path / "render_meta.json").read_text())
    slices = sorted(tmp_path.glob("slice_*.png"))
    assert len(slices) == 3  # one per depth slice
    assert (tmp_path / "weight_field.png").exists() or any(
        "omega" in f or "weight" in f for f in meta["files"])
    assert meta["files"]


def test_render_member_filter(ws, tmp_path):
    rc = main(["render", "--checkpoint", str(ws["run"] / "final.ckpt"),
               "--data", str(ws["test"]), "--frame", "0", "--members", "0",
               "--out", str(tmp_path)])
    assert rc == 0
    rc = main(["render", "--checkpoint", str(ws["run"] / "final.ckpt"),
               "--data", str(ws["test"]), "--frame", "0", "--members", "5",
               "--out", str(tmp_path / "bad")])
    assert rc == 2


def test_render_unknown_frame(ws, tmp_path):
    rc = main(["render", "--checkpoint", str(ws["run"] / "final.ckpt"),
               "--data", str(ws["test"]), "--frame", "nope",
               "--out", str(tmp_path)])
    assert rc == 3


# ---------------------------------------------------------------------------
# cost
# ---------------------------------------------------------------------------

def test_cost_writes_report(ws, tmp_path, capsys):
    rc = main(["cost", "--config", str(ws["cfg"]), "--frame-shape", "3x16x16",
               "--out", str(tmp_path)])
    assert rc == 0
    report = json.loads((tmp_path / "cost.json").read_text())
    assert report["frame_shape"] == [3, 16, 16]
    assert report["total_params"] == sum(report["member_params"])
    printed = capsys.readouterr().out
    assert json.loads(printed) == report


def test_cost_bad_shape(ws):
    assert main(["cost", "--config", str(ws["cfg"]), "--frame-shape", "64x64"]) == 2
    assert main(["cost", "--config", str(ws["cfg"]), "--frame-shape", "axbxc"]) == 2


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def test_sweep_runs_variants(ws, tmp_path):
    sweep = """
train: {learning_rate: 1e-3, epochs: 1, batch_frames: 2, seed: 0}
configurations:
  - name: duo
    members:
      - {base_channels: 4, depth_levels: 2, bottleneck_channels: 8, seed: 1}
      - {base_channels: 4, depth_levels: 2, bottleneck_channels: 8, seed: 2}
    ensemble: {mode: uncertainty}
  - name: lone
    members:
      - {base_channels: 4, depth_levels: 2, bottleneck_channels: 8, seed: 1}
    ensemble: {mode: fixed}
"""
    cfg = tmp_path / "sweep.yaml"
    cfg.write_text(sweep)
    rc = main(["sweep", "--config", str(cfg), "--train-data", str(ws["train"]),
               "--test-data", str(ws["test"]), "--out", str(tmp_path / "out")])
    assert rc == 0
    assert (tmp_path / "out" / "duo.csv").exists()
    assert (tmp_path / "out" / "lone.csv").exists()
    manifest = json.loads((tmp_path / "out" / "run_manifest.json").read_text())
    assert manifest["config"]["configurations"] == ["duo", "lone"]


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

def test_missing_config_exit_2(tmp_path):
    assert main(["generate", "--spec", str(tmp_path / "no.yaml"), "--count", "1",
                 "--out", str(tmp_path / "d")]) == 2


def test_missing_dataset_exit_3(ws, tmp_path):
    assert main(["train", "--config", str(ws["cfg"]), "--data",
                 str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 3


def test_bad_count_exit_2(ws, tmp_path):
    assert main(["generate", "--spec", str(ws["cfg"]), "--count", "0",
                 "--out", str(tmp_path / "d")]) == 2


def test_train_loss_trend_smoothed(ws, tmp_path):
    text = CONFIG.replace("epochs: 2", "epochs: 15")
    cfg = tmp_path / "long.yaml"
    cfg.write_text(text)
    assert main(["train", "--config", str(cfg), "--data", str(ws["train"]),
                 "--out", str(tmp_path / "run")]) == 0
    lines = (tmp_path / "run" / "loss.csv").read_text().splitlines()[1:]
    losses = [float(line.split(",")[3]) for line in lines]
    assert len(losses) == 15
    windows = [sum(losses[i:i + 5]) / 5 for i in range(0, 15, 5)]
    assert windows[0] > windows[1] > windows[2]  # smoothed trend points down
