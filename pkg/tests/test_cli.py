import json

import numpy as np
import pytest

from flimseg.cli import main
from flimseg.data import Dataset
from flimseg.encoder import load_bank
from flimseg.metrics import read_report_csv
from flimseg import sunet


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    code = main([
        "phantom", "gen", "--out", str(out), "--n", "8", "--size", "24",
        "--seed", "11", "--split", "0.5,0.25,0.25", "--marked", "2",
        "--marker-voxels", "12",
    ])
    assert code == 0
    return out


def test_phantom_gen_outputs(dataset):
    ds = Dataset(dataset)
    assert len(ds.case_ids()) == 8
    assert len(ds.case_ids("train")) == 4
    assert len(ds.case_ids("marked")) == 2
    assert (dataset / "montage.png").is_file()
    manifest = json.loads((dataset / "run_manifest.json").read_text())
    assert manifest["command"] == "phantom gen"
    assert manifest["config"]["n"] == 8


def test_phantom_gen_determinism(dataset, tmp_path):
    other = tmp_path / "again"
    assert main([
        "phantom", "gen", "--out", str(other), "--n", "8", "--size", "24",
        "--seed", "11", "--split", "0.5,0.25,0.25", "--marked", "2",
        "--marker-voxels", "12",
    ]) == 0
    for cid in Dataset(dataset).case_ids():
        for name in ("flair.mvol", "t1gd.mvol", "labels.mvol",
                     "markers_flair.mk", "markers_t1gd.mk"):
            assert (dataset / cid / name).read_bytes() == (other / cid / name).read_bytes()
    assert (dataset / "manifest").read_bytes() == (other / "manifest").read_bytes()


def test_flim_estimate(dataset, tmp_path):
    out = tmp_path / "bank"
    assert main([
        "flim", "estimate", "--data", str(dataset), "--out", str(out),
        "--modality", "T1Gd", "--clusters", "4", "--pca", "6", "--seed", "1",
    ]) == 0
    bank = load_bank(out / "bank_t1gd.fb")
    assert len(bank) == 6
    norms = np.linalg.norm(bank.weight_matrix.astype(np.float64), axis=1)
    assert np.abs(norms - 1).max() < 1e-6


def test_train_usage_contradictions(dataset, tmp_path):
    out = tmp_path / "t"
    code = main([
        "train", "--data", str(dataset), "--out", str(out),
        "--regime", "pbp", "--init", "random",
    ])
    assert code == 2
    code = main([
        "train", "--data", str(dataset), "--out", str(out),
        "--regime", "fbp", "--init", "flim",
    ])
    assert code == 2
    code = main([
        "train", "--data", str(dataset), "--out", str(out),
        "--regime", "pbp", "--init", "bank",
    ])
    assert code == 2  # --init bank without --encoders


def test_unknown_flag_exits_2(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--nonsense"]) == 2


def test_missing_input_exits_1(tmp_path):
    assert main([
        "eval", "--model", str(tmp_path / "nope.ckpt"), "--data", str(tmp_path),
        "--out", str(tmp_path / "o"),
    ]) == 1


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = main([
        "train", "--data", str(dataset), "--out", str(out),
        "--regime", "fbp", "--init", "random", "--epochs", "2",
        "--widths", "2,4,8", "--seed", "3",
    ])
    assert code == 0
    return out


def test_train_outputs(trained):
    assert (trained / "checkpoint.ckpt").is_file()
    assert (trained / "loss_curve.csv").is_file()
    assert (trained / "loss_curve.png").is_file()
    lines = (trained / "loss_curve.csv").read_text().strip().split("\n")
    assert lines[0] == "epoch,mean_loss,lr"
    assert len(lines) == 3
    model = sunet.load_checkpoint(trained / "checkpoint.ckpt")
    assert model.mode == "plain"


def test_eval_and_compare(dataset, trained, tmp_path):
    out = tmp_path / "eval"
    assert main([
        "eval", "--model", str(trained / "checkpoint.ckpt"), "--data", str(dataset),
        "--out", str(out), "--split", "test",
    ]) == 0
    report = read_report_csv(out / "dice_report.csv")
    assert len(report.case_ids) == 2
    assert (out / "dice_report.png").is_file()

    cmp_out = tmp_path / "cmp"
    ckpt = str(trained / "checkpoint.ckpt")
    assert main([
        "compare", "--models", f"{ckpt},{ckpt}", "--names", "a,b",
        "--data", str(dataset), "--out", str(cmp_out),
    ]) == 0
    lines = (cmp_out / "compare.csv").read_text().strip().split("\n")
    assert lines[0] == "model,dsc_et,dsc_nc,dsc_wt"
    assert len(lines) == 3
    assert (cmp_out / "compare.png").is_file()


def test_config_file_precedence(tmp_path):
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"n": 4, "size": 24, "marked": 1, "seed": 2,
                                  "split": "0.5,0.25,0.25", "marker_voxels": 10}))
    out = tmp_path / "ds"
    assert main(["phantom", "gen", "--out", str(out), "--config", str(config)]) == 0
    assert len(Dataset(out).case_ids()) == 4
    # flag beats config
    out2 = tmp_path / "ds2"
    assert main(["phantom", "gen", "--out", str(out2), "--config", str(config),
                 "--n", "5"]) == 0
    assert len(Dataset(out2).case_ids()) == 5
