import csv

import numpy as np
import pytest

from amsam.cli import main
from amsam.data import load_checkpoint, load_dataset, load_mask, read_metrics
from amsam.prompting import OracleDetector
from amsam.trainer import TrainConfig, evaluate, initial_checkpoint, split_dataset, train


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--count", "4", "--test-count", "3", "--seed", "7"]) == 0
    return out


def _files(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*.pgm"))}


def test_gen_data_writes_pairs(dataset):
    assert len(list(dataset.glob("img_*.pgm"))) == 4 and len(list(dataset.glob("mask_*.pgm"))) == 4
    assert len(load_dataset(dataset / "test")) == 3


def test_gen_data_byte_identical_rerun(dataset, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--count", "4", "--test-count", "3", "--seed", "7"]) == 0
    assert _files(tmp_path) == _files(dataset)


def test_gen_data_zero_count_is_usage_error(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--count", "0"]) == 1


def test_unknown_command_and_missing_flag():
    assert main(["frobnicate"]) == 1
    assert main(["train", "--data", "nowhere"]) == 1


def test_train_zero_lr_checkpoint_is_init(dataset, tmp_path):
    out = tmp_path / "run"
    code = main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "1",
                 "--lower-lr", "0", "--upper-lr", "0", "--seed", "2"])
    assert code == 0
    ckpt = load_checkpoint(out / "checkpoint.amck")
    init = initial_checkpoint(TrainConfig(seed=2, epochs=1, lower_lr=0.0, upper_lr=0.0))
    assert all(ckpt.tensors[n].tobytes() == init.tensors[n].tobytes() for n in init.tensors)
    rows = read_metrics(out / "metrics.csv")
    assert len(rows) == 1 and rows[0].test_dice is not None


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "4", "--seed", "1"]) == 0
    return out


def test_train_writes_one_row_per_epoch(trained, capsys):
    assert len(read_metrics(trained / "metrics.csv")) == 4


def test_baseline_flags_match_library_run(dataset, tmp_path):
    out = tmp_path / "base"
    assert main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "2", "--seed", "3",
                 "--no-box-prompts", "--no-calibration"]) == 0
    samples, test = load_dataset(dataset), load_dataset(dataset / "test")
    cfg = TrainConfig(seed=3, epochs=2, box_prompts=False, calibration_enabled=False)
    ckpt, _ = train(cfg, split_dataset(samples, 3, test))
    got = load_checkpoint(out / "checkpoint.amck")
    assert all(got.tensors[n].tobytes() == ckpt.tensors[n].tobytes() for n in ckpt.tensors)


def test_echoed_config_reproduces_run(dataset, trained, tmp_path):
    out = tmp_path / "again"
    assert main(["train", "--config", str(trained / "config.txt"), "--data", str(dataset), "--out", str(out)]) == 0
    assert (out / "checkpoint.amck").read_bytes() == (trained / "checkpoint.amck").read_bytes()
    assert (out / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()


def test_config_unknown_key_is_usage_error(dataset, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("epochs = 2\nwarp_speed = 9\n")
    assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "o")]) == 1


def test_flags_override_config_file(dataset, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# two epochs unless overridden\nepochs = 2\n")
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--data", str(dataset), "--out", str(out)]) == 0
    assert len(read_metrics(out / "metrics.csv")) == 1


# -- eval ---------------------------------------------------------------------------

def test_eval_prints_percent_dice(dataset, trained, capsys):
    ckpt_path = trained / "checkpoint.amck"
    assert main(["eval", "--checkpoint", str(ckpt_path), "--data", str(dataset / "test")]) == 0
    first = capsys.readouterr().out.strip()
    expected = 100 * evaluate(load_checkpoint(ckpt_path), load_dataset(dataset / "test"))
    assert first == f"{expected:.1f}"
    assert main(["eval", "--checkpoint", str(ckpt_path), "--data", str(dataset / "test")]) == 0
    assert capsys.readouterr().out.strip() == first


def test_eval_empty_dataset_is_usage_error(trained, tmp_path):
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.amck"), "--data", str(tmp_path)]) == 1


def test_eval_missing_checkpoint(dataset, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.amck"), "--data", str(dataset)]) == 2


# -- predict --------------------------------------------------------------------------

def _predict(trained, dataset, out, *extra):
    sid = sorted(p.stem[4:] for p in dataset.glob("img_*.pgm"))[0]
    args = ["predict", "--checkpoint", str(trained / "checkpoint.amck"), "--image",
            str(dataset / f"img_{sid}.pgm"), "--out", str(out), *extra]
    return sid, main(args)


def test_predict_binary_and_deterministic(dataset, trained, tmp_path):
    sid, code = _predict(trained, dataset, tmp_path / "a.pgm", "--mask", str(dataset / "mask_s0000.pgm"))
    assert code == 0
    _predict(trained, dataset, tmp_path / "b.pgm", "--mask", str(dataset / "mask_s0000.pgm"))
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw == (tmp_path / "b.pgm").read_bytes()
    assert set(np.unique(load_mask(tmp_path / "a.pgm"))) <= {0, 1}
    pixels = raw[raw.index(b"255\n") + 4:]
    assert set(pixels) <= {0, 255}


def test_predict_explicit_box_equals_oracle(dataset, trained, tmp_path):
    sid = "s0000"
    mask = load_mask(dataset / f"mask_{sid}.pgm")
    (box,) = OracleDetector(jitter=2, seed=1).detect(None, mask, sid)
    _predict(trained, dataset, tmp_path / "oracle.pgm", "--mask", str(dataset / f"mask_{sid}.pgm"))
    spec = ",".join(str(int(v)) for v in box.as_tuple())
    _predict(trained, dataset, tmp_path / "box.pgm", "--box", spec)
    assert (tmp_path / "oracle.pgm").read_bytes() == (tmp_path / "box.pgm").read_bytes()


def test_predict_bad_box_is_usage_error(dataset, trained, tmp_path):
    assert _predict(trained, dataset, tmp_path / "x.pgm", "--box", "1,2,3")[1] == 1


# -- ablate ------------------------------------------------------------------------------

def test_ablate_rows_and_baseline_arm(dataset, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(dataset), "--out", str(out), "--seeds", "0", "--epochs", "2"]) == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["arm"] for r in rows] == ["baseline", "box_prompts", "calibration", "full"]
    samples, test = load_dataset(dataset), load_dataset(dataset / "test")
    cfg = TrainConfig(seed=0, epochs=2, box_prompts=False, calibration_enabled=False)
    ckpt, _ = train(cfg, split_dataset(samples, 0, test))
    assert float(rows[0]["mean_test_dice"]) == pytest.approx(evaluate(ckpt, test), abs=5e-7)
