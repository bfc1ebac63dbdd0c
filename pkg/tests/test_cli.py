import csv
import json

import pytest

from timestep_lab.cli import main


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "seed": 2,
        "K": 80,
        "dataset": {"n": 500},
        "schedule": {"T": 50},
        "predictor": {"hidden_dims": [16], "time_embed_dim": 4},
        "sampler": {"kind": "adaptive"},
        "adaptive": {"f_s": 20, "hidden_dims": [8]},
        "optimizer": {"batch_size": 16},
        "eval": {"every": 40, "probe_size": 4, "n_generate": 20, "n_reference": 50},
        "checkpoint_every": 40,
    }
    (root / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(root / "c.json"), "--out", str(root / "run")]) == 0
    return root


def _run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_train_outputs(trained):
    run = trained / "run"
    assert {"metrics.csv", "evals.csv", "final.npz", "ckpt_0000040.npz", "config.json", "summary.json"} <= {p.name for p in run.iterdir()}


def test_cost_model(capsys):
    code, out, _ = _run(capsys, ["cost-model", "--subset", "3", "--batch", "128", "--T", "1000", "--fs", "40"])
    assert code == 0
    res = json.loads(out)
    assert res["delta_cost"] == 21.625 and res["overhead_ratio"] == 1.41015625


def test_profile_variance(trained, capsys):
    out_csv = trained / "vp.csv"
    code, out, _ = _run(capsys, ["profile-variance", "--ckpt", str(trained / "run/final.npz"), "--grid", "5", "--n", "4", "--out", str(out_csv)])
    assert code == 0 and json.loads(out)["points"] == 5
    with open(out_csv) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "t", "grad_var", "loss", "weighted_flag"] and len(rows) == 5


def test_interdependence(trained, capsys):
    out_csv = trained / "i.csv"
    argv = ["interdependence", "--ckpt", str(trained / "run/ckpt_0000040.npz"), "--range", "1:10", "--steps", "3", "--probe", "4", "--batch", "8", "--out", str(out_csv)]
    code, out, _ = _run(capsys, argv)
    assert code == 0 and json.loads(out)["range"] == [1, 10]
    with open(out_csv) as fh:
        assert len(list(csv.DictReader(fh))) == 50


def test_delta_eval(trained, capsys):
    argv = ["delta-eval", "--ckpt-before", str(trained / "run/ckpt_0000040.npz"), "--ckpt-after", str(trained / "run/final.npz"), "--batch", "8"]
    code, out, _ = _run(capsys, argv)
    res = json.loads(out)
    assert code == 0 and res["S"] == [12, 25, 38] and "delta_full" not in res
    code, out, _ = _run(capsys, argv + ["--full", "--subset", "1,2", "--out", str(trained / "d.csv")])
    res = json.loads(out)
    assert code == 0 and res["S"] == [1, 2] and "delta_full" in res
    assert (trained / "d.csv").read_text().startswith("tau,delta")


def test_generate(trained, capsys):
    code, out, _ = _run(capsys, ["generate", "--ckpt", str(trained / "run/final.npz"), "--n", "10", "--ema", "--out", str(trained / "s.csv")])
    res = json.loads(out)
    assert code == 0 and res["n"] == 10 and res["energy_distance"] >= 0
    assert len((trained / "s.csv").read_text().splitlines()) == 11


def test_missing_checkpoint_is_json_error(capsys, tmp_path):
    code, out, err = _run(capsys, ["generate", "--ckpt", str(tmp_path / "nope.npz")])
    assert code == 1 and out == ""
    assert json.loads(err)["error"] == "FileNotFoundError"


def test_usage_errors_are_json(capsys):
    code, _, err = _run(capsys, ["bogus"])
    assert code == 2 and json.loads(err)["error"] == "usage"
    code, _, err = _run(capsys, ["interdependence", "--ckpt", "x.npz", "--range", "oops"])
    assert code != 0 and "error" in json.loads(err)


def test_bad_config_is_json_error(capsys, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"sampler": {"kind": "nope"}}))
    code, _, err = _run(capsys, ["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")])
    assert code == 1 and json.loads(err)["error"] == "ConfigError"
