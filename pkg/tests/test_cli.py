import json
import subprocess
import sys

import pytest
from PIL import Image

from retinasr.cli import build_parser, cli, parse_args
from retinasr.pipeline import load_patch_store, select


def test_paper_defaults_are_flag_defaults():
    args = parse_args(["train", "--store", "s", "--out", "o"])
    assert (args.lambda_l1, args.alpha, args.lr, args.epochs) == (100.0, 1.0, 1e-4, 100)
    assert (args.beta1, args.beta2, args.batch_size) == (0.5, 0.999, 16)
    assert (args.arch, args.upsampler, args.dice) == ("resnet", "subpixel", True)
    pre = parse_args(["preprocess", "--data", "d", "--out", "o"])
    assert (pre.ratio, pre.patch, pre.overlap, pre.split) == (0.8, 224, 0.75, "by-patient")
    gen = parse_args(["generate-data", "--out", "o"])
    assert gen.patients * gen.scans_per_patient == 855


def test_best_configuration_flags():
    args = parse_args(["train", "--store", "s", "--out", "o", "--arch", "resnet",
                       "--upsampler", "subpixel", "--dice"])
    assert (args.arch, args.upsampler, args.dice) == ("resnet", "subpixel", True)
    assert parse_args(["train", "--store", "s", "--out", "o", "--no-dice"]).dice is False


@pytest.mark.parametrize("argv", [
    ["train", "--store", "s", "--out", "o", "--bogus"],
    ["frobnicate"],
    [],
    ["grid", "--out", "o"],
    ["evaluate", "--store", "s"],
])
def test_bad_invocations_exit_nonzero_with_usage(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        cli(argv)
    assert exc.value.code != 0
    assert "usage:" in capsys.readouterr().err


def test_config_file_supplies_defaults(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 3, "base-width": 16, "lr": 5e-4}))
    args = parse_args(["train", "--store", "s", "--out", "o", "--config", str(cfg), "--lr", "2e-4"])
    assert args.epochs == 3 and args.base_width == 16
    assert args.lr == 2e-4  # explicit flag wins
    cfg.write_text(json.dumps({"no_such_flag": 1}))
    with pytest.raises(SystemExit):
        parse_args(["train", "--store", "s", "--out", "o", "--config", str(cfg)])


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "retinasr.cli", "--help"],
                         capture_output=True, text=True, check=True)
    for name in ("generate-data", "preprocess", "train", "evaluate", "grid", "render"):
        assert name in out.stdout
    assert build_parser().prog == "retinasr"


@pytest.fixture(scope="module")
def store(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli(["generate-data", "--out", str(root / "data"), "--patients", "3",
                "--scans-per-patient", "1", "--height", "224", "--width", "280"]) == 0
    assert cli(["preprocess", "--data", str(root / "data"), "--out", str(root / "store"),
                "--augment", "identity,rotate(5)", "--ratio", "0.67"]) == 0
    return root


def test_preprocess_output(store, capsys):
    pairs, split = load_patch_store(store / "store")
    # 3 scans, 2 augmentations, 2 windows across a 280-wide scan
    assert len(pairs) == 12
    assert len(split.train) + len(split.test) == 12
    assert {p.patient_id for p in select(pairs, split.train)}.isdisjoint(
        {p.patient_id for p in select(pairs, split.test)})
    assert (store / "store" / "stats.txt").read_text().startswith("n_scans: 3")


def test_train_then_evaluate_checkpoint(store, capsys):
    out = store / "run"
    assert cli(["train", "--store", str(store / "store"), "--out", str(out), "--epochs", "1",
                "--batch-size", "4", "--base-width", "8", "--depth", "1",
                "--disc-width", "4", "--lr", "1e-3"]) == 0
    history = capsys.readouterr().out.splitlines()
    assert history[0].startswith("epoch,d_loss") and len(history) == 2
    assert (out / "final.pt").exists() and (out / "history.csv").exists()
    assert cli(["evaluate", "--store", str(store / "store"), "--checkpoint",
                str(out / "final.pt")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("config_id,dice,miou")
    dice = float(lines[1].split(",")[1])
    assert 0 <= dice <= 1
    # the reported Dice agrees with the last history record
    assert dice == pytest.approx(float(history[1].split(",")[6]), abs=1e-6)


def test_evaluate_ground_truth_predictions(store, tmp_path, capsys):
    pairs, split = load_patch_store(store / "store")
    for p in select(pairs, split.test):
        Image.fromarray(p.target_label_hr).save(tmp_path / f"{p.pair_id}.png")
    assert cli(["evaluate", "--store", str(store / "store"), "--predictions", str(tmp_path)]) == 0
    row = capsys.readouterr().out.splitlines()[1].split(",")
    assert float(row[1]) == 1.0 and float(row[2]) == 1.0


def test_evaluate_reports_missing_predictions(store, tmp_path):
    assert cli(["evaluate", "--store", str(store / "store"), "--predictions", str(tmp_path)]) == 1


def test_grid_rows_then_render(tmp_path, capsys):
    run = tmp_path / "grid"
    code = cli(["grid", "--smoke", "--out", str(run),
                "--rows", "joint-resnet-subpixel-dice,disjoint_srcnn-resnet-dice"])
    assert code == 0
    text = capsys.readouterr().out
    assert "0.867" in text and "0.838" in text
    assert len((run / "results.csv").read_text().splitlines()) == 3
    again = tmp_path / "again"
    assert cli(["render", "--run", str(run), "--out", str(again)]) == 0
    assert (again / "results.csv").read_bytes() == (run / "results.csv").read_bytes()
    with Image.open(next((again / "panels").glob("*.png"))) as im:
        assert im.size == (4 * 224, 224)


def test_grid_rejects_unknown_row(tmp_path):
    assert cli(["grid", "--smoke", "--out", str(tmp_path), "--rows", "nope"]) == 2
