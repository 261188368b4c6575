import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from ssae.cli import MANIFEST, RunManifest, build_parser, main

TRAIN = ["--category", "stripes", "--schedule", "16:2,32:2", "--width", "2", "--lr", "1e-3",
         "--batch-size", "2", "--val-every", "2", "--seed", "5"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    code = main(["synth", "--spec", "stripes", "--out", str(root), "--seed", "7",
                 "--n-train", "10", "--n-test", "4", "--side", "32"])
    assert code == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("cli_run") / "run"
    assert main(["train", "--data", str(dataset), "--out", str(run), *TRAIN]) == 0
    return run


def _tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != MANIFEST}


def test_synth_layout_and_manifest(dataset):
    assert (dataset / "stripes" / "train" / "good").is_dir()
    assert list((dataset / "stripes" / "ground_truth").rglob("*_mask.png"))
    m = RunManifest.read(dataset)
    assert m.command == "synth"
    assert m.seeds == {"seed": 7}
    assert "stripes/train/good/000.png" in m.artifacts


def test_synth_refuses_non_empty_dir(dataset, capsys):
    assert main(["synth", "--spec", "stripes", "--out", str(dataset), "--seed", "7"]) == 1
    assert "--force" in capsys.readouterr().err


def test_synth_force_is_byte_identical(dataset, tmp_path):
    before = _tree_bytes(dataset)
    copy = tmp_path / "again"
    assert main(["rerun", "--manifest", str(dataset), "--out", str(copy)]) == 0
    assert _tree_bytes(copy) == before
    assert main(["rerun", "--manifest", str(copy / MANIFEST), "--force"]) == 0
    assert _tree_bytes(copy) == before


def test_force_will_not_wipe_foreign_directory(tmp_path):
    foreign = tmp_path / "mine"
    foreign.mkdir()
    (foreign / "keep.txt").write_text("x")
    assert main(["synth", "--spec", "stripes", "--out", str(foreign), "--seed", "1", "--force"]) == 1
    assert (foreign / "keep.txt").exists()


def test_missing_spec_is_usage_error(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d")]) == 2


def test_unknown_spec_is_usage_error(tmp_path):
    assert main(["synth", "--spec", "nope", "--out", str(tmp_path / "d"), "--seed", "1"]) == 2


def test_no_command_is_usage_error():
    assert main([]) == 2


def test_generated_seed_is_printed_and_recorded(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["synth", "--spec", "noise", "--out", str(out), "--n-train", "2", "--n-test", "0",
                 "--side", "16"]) == 0
    printed = capsys.readouterr().out
    seed = RunManifest.read(out).seeds["seed"]
    assert f"seed: {seed} (generated)" in printed


def test_train_outputs(trained):
    assert (trained / "model.ckpt").exists()
    rows = (trained / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,side,train_loss,val_criterion"
    assert len(rows) == 1 + 4
    ckpts = sorted(p.name for p in (trained / "checkpoints").iterdir())
    assert ckpts == ["best.ckpt", "step000002_side16.ckpt", "step000004_side32.ckpt"]
    m = RunManifest.read(trained)
    assert m.command == "train"
    assert m.config["schedule"] == "16:2,32:2"
    assert m.config["lam"] == 0.5
    assert m.seeds == {"seed": 5, "split_seed": 5}
    assert "loss.csv" in m.artifacts and "model.ckpt" in m.artifacts
    assert m.started and m.finished


def test_train_v3_enables_early_stopping():
    from ssae.cli import _train_configs, parse_args

    args = parse_args(["train", "--data", "x", "--category", "c", "--objective", "v3", "--seed", "1"])
    _, cfg = _train_configs(vars(args))
    assert cfg.use_early_stopping
    args = parse_args(["train", "--data", "x", "--category", "c", "--seed", "1"])
    _, cfg = _train_configs(vars(args))
    assert not cfg.use_early_stopping


@pytest.mark.parametrize("bad", [["--lambda", "1.5"], ["--lambda", "-0.1"], ["--schedule", "64-500"]])
def test_train_rejects_bad_options(dataset, tmp_path, bad):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), *TRAIN, *bad]) == 2
    assert not (tmp_path / "r").exists()


def test_train_invalid_schedule_is_config_error(dataset, tmp_path, capsys):
    code = main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), *TRAIN, "--schedule", "20:2"])
    assert code == 1
    assert "multiple of 8" in capsys.readouterr().err


def test_train_missing_data_dir(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "r"), *TRAIN]) == 1


def test_config_file_merges_under_flags(tmp_path):
    from ssae.cli import parse_args

    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lr": 0.5, "width": 4, "schedule": "16:1,32:1"}))
    args = parse_args(["train", "--config", str(cfg), "--width", "6"])
    assert args.lr == 0.5
    assert args.width == 6
    assert args.schedule == ((16, 1), (32, 1))


def test_config_file_unknown_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rate": 0.5}))
    assert main(["train", "--config", str(cfg)]) == 2


def test_calibrate_then_infer(trained, dataset, tmp_path):
    assert main(["calibrate", "--run", str(trained), "--sigma", "1"]) == 0
    side = json.loads((trained / "threshold.json").read_text())
    assert side["threshold"] > 0 and side["min_area"] == 16 and side["sigma"] == 1.0

    imgs = sorted((dataset / "stripes" / "test").rglob("*.png"))[:3]
    out = tmp_path / "pred"
    assert main(["infer", "--run", str(trained), "--input", *map(str, imgs), "--out", str(out)]) == 0
    m = RunManifest.read(out)
    assert m.results["images"] == 3
    assert m.results["forward_passes"] == 3
    assert m.config["threshold"] == side["threshold"]
    for suffix in ("_recon.png", "_heatmap.png", "_heatmap.npy", "_segmentation.png", "_components.json"):
        assert len(list(out.glob(f"*{suffix}"))) == 3
    seg = np.asarray(Image.open(next(out.glob("*_segmentation.png"))))
    assert seg.shape == (32, 32)


def test_infer_without_threshold_explains(trained, dataset, tmp_path, capsys):
    sidecar = trained / "threshold.json"
    saved = sidecar.read_bytes() if sidecar.exists() else None
    if saved is not None:
        sidecar.unlink()
    try:
        img = next((dataset / "stripes" / "train" / "good").glob("*.png"))
        code = main(["infer", "--run", str(trained), "--input", str(img), "--out", str(tmp_path / "p")])
        assert code == 1
        assert "ssae calibrate" in capsys.readouterr().err
        code = main(["infer", "--run", str(trained), "--input", str(img), "--out", str(tmp_path / "p"),
                     "--threshold", "0.9"])
        assert code == 0
    finally:
        if saved is not None:
            sidecar.write_bytes(saved)


def test_missing_checkpoint(tmp_path, trained):
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / MANIFEST).write_text((trained / MANIFEST).read_text())
    assert main(["calibrate", "--run", str(broken)]) == 1
    assert main(["eval", "--run", str(broken), "--out", str(tmp_path / "e")]) == 1


def test_eval_one_row_per_category(trained, tmp_path):
    out = tmp_path / "ev"
    assert main(["eval", "--run", str(trained), "--out", str(out), "--sigma", "1"]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("category,tpr,tnr,balanced_accuracy,pixel_auroc")
    assert len(lines) == 2 and lines[1].startswith("stripes,")


def test_train_and_eval_rerun_identical(trained, tmp_path):
    again = tmp_path / "again"
    assert main(["rerun", "--manifest", str(trained), "--out", str(again)]) == 0
    assert (again / "loss.csv").read_bytes() == (trained / "loss.csv").read_bytes()
    ev1, ev2 = tmp_path / "e1", tmp_path / "e2"
    assert main(["eval", "--run", str(trained), "--out", str(ev1)]) == 0
    assert main(["rerun", "--manifest", str(ev1), "--out", str(ev2)]) == 0
    assert (ev1 / "metrics.csv").read_bytes() == (ev2 / "metrics.csv").read_bytes()


def test_rerun_missing_manifest(tmp_path):
    assert main(["rerun", "--manifest", str(tmp_path)]) == 1


def test_parser_lists_all_commands():
    text = build_parser().format_help()
    for name in ("synth", "train", "calibrate", "infer", "eval", "rerun"):
        assert name in text
