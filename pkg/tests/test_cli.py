import filecmp
import re

import numpy as np
import pytest

from l3d.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, main, read_csv
from l3d.io import load_dataset

SMALL = ["--set", "toy.n_data=400", "--set", "toy.epochs=4", "--set", "l3d.epochs=3", "--set", "l3d.n_data=200",
         "--set", "analysis.n_inputs=40", "--set", "analysis.n_per_group=4", "--set", "analysis.n_refs=3"]


def pipeline(out, preset, seed=0, extra=()):
    common = ["--config", preset, "--out", str(out), "--seed", str(seed), *SMALL, *extra]
    for verb in ("gen-data", "train-toy", "decompose", "eval"):
        assert main([verb, *common]) == 0, verb
    assert main(["intervene", *common, "--pairs", "0:1"]) == 0
    assert main(["decompose", *common, "--sweep", "--set", "sweep.n_v=2,3", "--set", "sweep.rank=1"]) == 0
    assert main(["report", *common]) == 0


def payload_files(d):
    return sorted(p.name for p in d.iterdir() if not p.name.startswith("meta_"))


@pytest.mark.parametrize("preset", ["tms", "tmcs"])
def test_pipeline_rerun_is_byte_identical(tmp_path, preset):
    a, b = tmp_path / "a", tmp_path / "b"
    pipeline(a, preset)
    pipeline(b, preset)
    names = payload_files(a)
    assert names == payload_files(b)
    match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
    assert not mismatch and not errors
    for want in ("dataset.l3dt", "model.l3dt", "basis.l3dt", "toy_loss.csv", "l3d_loss.csv", "pact.csv",
                 "weights.csv", "eval.json", "intervene.csv", "intervene_pairs.csv", "sweep.csv"):
        assert want in names
    if preset == "tmcs":
        assert "coefficients.csv" in names


def test_different_seed_changes_outputs(tmp_path):
    pipeline(tmp_path / "a", "tms", seed=0)
    pipeline(tmp_path / "b", "tms", seed=1)
    assert (tmp_path / "a" / "l3d_loss.csv").read_bytes() != (tmp_path / "b" / "l3d_loss.csv").read_bytes()


def test_csv_format(tmp_path):
    pipeline(tmp_path, "tms")
    text = (tmp_path / "l3d_loss.csv").read_bytes().decode("utf-8")
    assert "\r" not in text
    lines = text.split("\n")
    assert re.fullmatch(r"# config_hash=[0-9a-f]{16}", lines[0])
    assert lines[1] == "epoch [count],loss [ratio]"
    value = lines[2].split(",")[1]
    assert len(value.replace(".", "").replace("-", "").split("e")[0].lstrip("0")) <= 17
    assert float(value) == float(f"{float(value):.17g}")
    header, rows = read_csv(tmp_path / "intervene.csv")
    d = np.array(rows, dtype=float)
    assert header[0].startswith("subnetwork") and np.all(d[d[:, 1] == 0.0, 3] == 0.0)
    assert len(np.unique(d[:, 0])) == 5 and len(np.unique(d[:, 1])) == 21


def test_gen_data_shapes(tmp_path):
    assert main(["gen-data", "--config", "tms", "--out", str(tmp_path / "t")]) == 0
    task, data, _ = load_dataset(tmp_path / "t" / "dataset.l3dt")
    assert data.X.shape == (10000, 5) and data.X.min() >= 0 and data.X.max() < 1
    assert abs(np.mean(data.X != 0) - 0.05) < 0.005
    assert main(["gen-data", "--config", "square", "--out", str(tmp_path / "s")]) == 0
    _, sq, _ = load_dataset(tmp_path / "s" / "dataset.l3dt")
    assert sq.X.min() < -0.9 and sq.X.max() < 1


def test_epochs_override(tmp_path):
    common = ["--config", "tms", "--out", str(tmp_path), "--set", "toy.n_data=100"]
    main(["gen-data", *common])
    assert main(["train-toy", *common, "--epochs", "7"]) == 0
    assert len(read_csv(tmp_path / "toy_loss.csv")[1]) == 7


def test_exit_codes(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["eval", "--out", out]) == EXIT_IO
    assert main(["gen-data", "--out", out, "--set", "l3d.k=5"]) == EXIT_CONFIG
    assert main(["gen-data", "--out", out, "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    pipeline(tmp_path, "tms")
    assert main(["intervene", "--out", out, *SMALL, "--subnetworks", "9"]) == EXIT_CONFIG
    assert main(["eval", "--out", out, "--config", "tmcs", *SMALL]) == EXIT_CONFIG
    (tmp_path / "basis.l3dt").write_bytes(b"L3DT\x07\x00\x00\x00")
    assert main(["eval", "--out", out, *SMALL]) == EXIT_IO
    assert main(["train-toy", "--out", out, "--set", "toy.n_data=400", "--set", "toy.lr=1e300",
                 "--epochs", "3"]) == EXIT_NUMERICAL
    err = capsys.readouterr().err
    assert "numerical error" in err and "I/O error" in err and "config error" in err


def test_threads_flag_and_env(tmp_path, monkeypatch):
    assert main(["gen-data", "--out", str(tmp_path), "--threads", "1", "--set", "toy.n_data=10"]) == 0
    monkeypatch.setenv("L3D_THREADS", "1")
    assert main(["gen-data", "--out", str(tmp_path), "--set", "toy.n_data=10"]) == 0
    monkeypatch.setenv("L3D_THREADS", "many")
    assert main(["gen-data", "--out", str(tmp_path), "--set", "toy.n_data=10"]) == EXIT_CONFIG
