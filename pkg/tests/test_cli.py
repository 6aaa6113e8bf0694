import csv
import importlib
import json
import subprocess
import sys

import numpy as np
import pytest

from neuralhmm.cli import main
from neuralhmm.model import NeuralHmm

# the package re-exports a ``train`` function, which shadows the submodule attribute
train_mod = importlib.import_module("neuralhmm.train")


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def small_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["generate", "--targets", "3", "--dim", "2", "--steps", "20", "--trajs", "8", "--seed", "1",
                 "--out", str(d / "data.csv")]) == 0
    return d / "data.csv"


@pytest.fixture(scope="module")
def trained(small_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("model")
    assert main(["train", "--data", str(small_csv), "--depth", "1", "--width", "6", "--dh", "2",
                 "--particles", "16", "--em-iters", "2", "--sgd-steps", "5", "--out-dir", str(out),
                 "--threads", "1"]) == 0
    return out


def test_generate_counts(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["generate", "--targets", "5", "--dim", "2", "--steps", "200", "--trajs", "50", "--seed", "1",
                 "--out", str(out)]) == 0
    r = rows(out)
    assert len(r) == 1 + 50 * 201
    assert len({row[0] for row in r[1:]}) == 50
    side = json.loads(out.with_suffix(".json").read_text())
    assert side["K"] == 50 and side["seed"] == 1


def test_generate_byte_identical(tmp_path):
    args = ["generate", "--steps", "30", "--trajs", "5", "--seed", "9"]
    main(args + ["--out", str(tmp_path / "a.csv")])
    main(args + ["--out", str(tmp_path / "b.csv")])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_generate_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--dim", "0"])
    assert exc.value.code == 2


def test_generate_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("NEURALHMM_OUT", str(tmp_path / "envout"))
    assert main(["generate", "--steps", "3", "--trajs", "2"]) == 0
    assert (tmp_path / "envout" / "data.csv").exists()


def test_train_outputs(trained):
    hist = rows(trained / "history.csv")
    assert len(hist) == 1 + 2
    m = NeuralHmm.load(trained / "model.json")
    assert m.f_net.depth == 1 and m.d_h == 2


def test_train_history_rows_with_fine_tune(small_csv, tmp_path):
    assert main(["train", "--data", str(small_csv), "--depth", "3", "--dh", "2", "--width", "4",
                 "--particles", "128", "--em-iters", "2", "--fine-tune-iters", "1", "--sgd-steps", "2",
                 "--fraction", "0.5", "--eval-trajs", "2", "--out-dir", str(tmp_path)]) == 0
    hist = rows(tmp_path / "history.csv")
    assert len(hist) - 1 == 3
    assert [r[5] for r in hist[1:]] == ["0.5", "0.5", "1.0"]


def test_train_depth0_uses_closed_form(small_csv, tmp_path, monkeypatch):
    calls = []
    real = train_mod.closed_form_m_step

    def spy(*a, **kw):
        calls.append(1)
        return real(*a, **kw)

    monkeypatch.setattr(train_mod, "closed_form_m_step", spy)
    assert main(["train", "--data", str(small_csv), "--depth", "0", "--particles", "16", "--em-iters", "3",
                 "--out-dir", str(tmp_path)]) == 0
    assert len(calls) == 3


def test_train_truncated_file(small_csv, tmp_path, capsys):
    lines = small_csv.read_text().splitlines()
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines[:10]) + "\n" + lines[10].rsplit(",", 1)[0] + "\n")
    assert main(["train", "--data", str(bad), "--out-dir", str(tmp_path)]) == 3
    assert "line 11" in capsys.readouterr().err


def test_train_dimension_conflict(trained, small_csv, tmp_path, capsys):
    three = tmp_path / "d3.csv"
    main(["generate", "--dim", "3", "--steps", "5", "--trajs", "2", "--out", str(three)])
    assert main(["latents", "--model", str(trained / "model.json"), "--data", str(three),
                 "--out", str(tmp_path / "l.csv")]) == 3
    assert "dimension 3" in capsys.readouterr().err


def test_config_override(small_csv, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"em_iters": 1, "particles": 8}))
    assert main(["train", "--data", str(small_csv), "--depth", "0", "--config", str(cfg),
                 "--out-dir", str(tmp_path)]) == 0
    assert len(rows(tmp_path / "history.csv")) == 2
    assert json.loads((tmp_path / "train_config.json").read_text())["particle_count"] == 8


def test_config_unknown_key(small_csv, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["train", "--data", str(small_csv), "--config", str(cfg), "--out-dir", str(tmp_path)]) == 2


def test_eval_sweep_rows(small_csv, tmp_path):
    assert main(["eval", "--data", str(small_csv), "--sweep", "dh", "--values", "2,3", "--seeds", "0,1",
                 "--depth", "0", "--particles", "8", "--em-iters", "1", "--test-fraction", "0.25",
                 "--out-dir", str(tmp_path)]) == 0
    r = rows(tmp_path / "sweep.csv")
    assert r[0] == ["sweep_var", "value", "metric", "mean", "std", "seed"]
    assert len(r) - 1 == 2 * 2 * 2  # values x metrics x seeds
    summary = json.loads((tmp_path / "sweep_summary.json").read_text())
    assert summary["metrics"]["one_step_error"]["2"]["n_seeds"] == 2


def test_eval_empty_sweep(small_csv, tmp_path):
    assert main(["eval", "--data", str(small_csv), "--sweep", "particles", "--values", ",",
                 "--out-dir", str(tmp_path)]) == 2


def test_latents_rows(trained, small_csv, tmp_path):
    tid = rows(small_csv)[1][0]
    out = tmp_path / "lat.csv"
    assert main(["latents", "--model", str(trained / "model.json"), "--data", str(small_csv),
                 "--traj", tid, "--particles", "256", "--out", str(out)]) == 0
    r = rows(out)
    assert len(r) - 1 == 21 and r[0] == ["traj_id", "t", "h0", "h1"]


def test_cluster_with_pca(trained, small_csv, tmp_path):
    out = tmp_path / "cl.csv"
    assert main(["cluster", "--model", str(trained / "model.json"), "--data", str(small_csv), "--k", "2",
                 "--pca", "2", "--particles", "32", "--out", str(out)]) == 0
    r = rows(out)
    assert r[0] == ["traj_id", "t", "pc0", "pc1", "label"]
    assert {row[-1] for row in r[1:]} <= {"0", "1"}
    summary = json.loads(out.with_suffix(".json").read_text())
    assert 0 <= summary["target_agreement"] <= 1


def test_cluster_from_latents_file(trained, small_csv, tmp_path):
    lat = tmp_path / "lat.csv"
    main(["latents", "--model", str(trained / "model.json"), "--data", str(small_csv), "--particles", "16",
          "--out", str(lat)])
    assert main(["cluster", "--latents", str(lat), "--k", "3", "--out", str(tmp_path / "c.csv")]) == 0
    assert len(rows(tmp_path / "c.csv")) == 1 + 8 * 21


def test_missing_model_file(small_csv, tmp_path, capsys):
    assert main(["latents", "--model", str(tmp_path / "nope.json"), "--data", str(small_csv)]) == 3
    assert "model file not found" in capsys.readouterr().err


def test_cluster_needs_input(tmp_path):
    assert main(["cluster", "--k", "2"]) == 2


def test_console_script(tmp_path):
    res = subprocess.run([sys.executable, "-m", "neuralhmm.cli", "generate", "--steps", "2", "--trajs", "1",
                          "--out", str(tmp_path / "x.csv")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert np.loadtxt(tmp_path / "x.csv", delimiter=",", skiprows=1, usecols=(1,)).tolist() == [0, 1, 2]
