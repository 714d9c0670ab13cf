import csv

import numpy as np
import pytest

from cfcm import tensor
from cfcm.cli import main
from cfcm.data import load_mask, read_dataset

TINY = ["--epochs", "1", "--batch-size", "8", "--width-mult", "1/8", "--hidden", "4", "--lr", "1e-3"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out-dir", str(root), "--count", "32", "--seed", "3"]) == 0
    return root


def run_train(out, data, *extra):
    return main(["train", "--out-dir", str(out), "--data-dir", str(data / "data"), *TINY, *extra])


def test_synth_writes_dataset(tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path)]) == 0
    ds = read_dataset(tmp_path / "data")
    assert len(ds) == 64 and ds.images.shape[1:] == (1, 64, 64)
    first = {p.name: p.read_bytes() for p in (tmp_path / "data" / "images").iterdir()}
    assert main(["synth", "--out-dir", str(tmp_path)]) == 0
    second = {p.name: p.read_bytes() for p in (tmp_path / "data" / "images").iterdir()}
    assert first == second


def test_invalid_classes_is_usage_error(tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path), "--classes", "2"]) == 2
    assert not (tmp_path / "data").exists()


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("count = 8\nbogus = 1\n")
    assert main(["synth", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2


def test_config_file_and_cli_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny corpus\ncount = 8\nseed = 4\n")
    assert main(["synth", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    assert len(read_dataset(tmp_path / "data")) == 8
    assert main(["synth", "--config", str(cfg), "--count", "5", "--out-dir", str(tmp_path / "b")]) == 0
    assert len(read_dataset(tmp_path / "b" / "data")) == 5


@pytest.mark.parametrize("decoder", ["cfcm", "skip_sum", "skip_concat"])
def test_train_each_decoder(tmp_path, data_dir, decoder, capsys):
    assert run_train(tmp_path, data_dir, "--decoder", decoder) == 0
    assert (tmp_path / "model.ckpt").is_file()
    log = (tmp_path / "train_log.csv").read_text().splitlines()
    assert any(line.startswith(f"# decoder={decoder}") for line in log)
    rows = [line for line in log if not line.startswith("#")]
    assert rows[0] == "epoch,step,loss,train_dice" and len(rows) > 1
    assert f"decoder={decoder} depth=18 best_val_dice=" in capsys.readouterr().out


def test_train_is_bit_identical(tmp_path, data_dir):
    names = ("model.ckpt", "train_log.csv")
    assert run_train(tmp_path, data_dir) == 0
    first = [(tmp_path / n).read_bytes() for n in names]
    assert run_train(tmp_path, data_dir) == 0
    assert [(tmp_path / n).read_bytes() for n in names] == first
    assert run_train(tmp_path / "elsewhere", data_dir) == 0
    assert [(tmp_path / "elsewhere" / n).read_bytes() for n in names] == first


def test_eval_emits_aggregate_row(tmp_path, data_dir):
    assert run_train(tmp_path, data_dir) == 0
    assert main(["eval", "--out-dir", str(tmp_path), "--data-dir", str(data_dir / "data")]) == 0
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["sample_id", "class"]
    assert [r[0] for r in rows].count("aggregate") == 1
    assert "±" in rows[-1][2]


def test_eval_with_mismatched_model_keys(tmp_path, data_dir):
    assert run_train(tmp_path, data_dir) == 0
    argv = ["eval", "--out-dir", str(tmp_path), "--data-dir", str(data_dir / "data"), "--depth", "34"]
    assert main(argv) == 2


def test_kfold_train_and_eval(tmp_path, data_dir):
    assert run_train(tmp_path, data_dir, "--folds", "3") == 0
    for f in range(3):
        assert (tmp_path / f"model.fold{f}.ckpt").is_file()
    assert main(["eval", "--out-dir", str(tmp_path), "--data-dir", str(data_dir / "data"), "--folds", "3"]) == 0
    labels = [line.split(",")[0] for line in (tmp_path / "report.csv").read_text().splitlines()]
    assert [x for x in labels if x.startswith("fold")] == ["fold0", "fold1", "fold2"]
    assert labels[-1] == "aggregate"


def test_missing_checkpoint(tmp_path, data_dir):
    argv = ["eval", "--out-dir", str(tmp_path), "--data-dir", str(data_dir / "data"), "--checkpoint", "nope.ckpt"]
    assert main(argv) == 2


def test_gradcheck_commands(monkeypatch, capsys):
    assert main(["gradcheck", "--only", "convlstm"]) == 0
    assert "convlstm" in capsys.readouterr().out
    assert main(["gradcheck", "--only", "nonsense"]) == 2
    wrong = tensor.BACKWARD["tanh"]
    monkeypatch.setitem(tensor.BACKWARD, "tanh", lambda g, s: tuple(-d for d in wrong(g, s)))
    assert main(["gradcheck", "--only", "pointwise"]) != 0


@pytest.mark.slow
def test_gradcheck_full_suite():
    assert main(["gradcheck"]) == 0


def test_predict_mask(tmp_path, data_dir):
    assert run_train(tmp_path, data_dir) == 0
    image = sorted((data_dir / "data" / "images").iterdir())[0]
    out = tmp_path / "pred.pgm"
    assert main(["predict", "--out-dir", str(tmp_path), "--image", str(image), "--output", str(out)]) == 0
    mask = load_mask(out)
    assert mask.shape == (64, 64)
    assert set(np.unique(mask).tolist()) <= {0, 1}


def test_predict_needs_image(tmp_path):
    assert main(["predict", "--out-dir", str(tmp_path)]) == 2
