import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from ppcate import cli
from ppcate.data import read_csv
from ppcate.pipeline import PipelineConfig, fit_pipeline
from ppcate.scores import ConvergenceError, ScoreModel
from ppcate.tree import CateTree, Node


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "data.csv"
    assert cli.main(["simulate", "--scenario", "1", "--n", "1000", "--d", "2",
                     "--seed", "7", "--out", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def bundle(data_csv):
    out = data_csv.parent / "bundle"
    assert cli.main(["fit", str(data_csv), "--out", str(out), "--seed", "3",
                     "--dump-matches"]) == 0
    return out


def test_simulate_writes_expected_columns(data_csv):
    df = pd.read_csv(data_csv)
    assert list(df.columns) == ["x1", "x2", "z", "y", "tau_true"] and len(df) == 1000


def test_fit_bundle_contents(bundle):
    names = sorted(p.name for p in bundle.iterdir())
    assert names == ["grid.csv", "manifest.json", "matches.csv", "scores.json",
                     "tree.json", "tree.txt"]
    assert "leaf" in (bundle / "tree.txt").read_text()
    man = json.loads((bundle / "manifest.json").read_text())
    assert man["schema_version"] == 1 and man["seed"] == 3
    assert man["config"] == PipelineConfig(seed=3).to_dict()
    assert set(man["versions"]) >= {"ppcate", "numpy", "scipy", "pandas"}
    assert man["resolved"]["K"] == 7


def test_fit_is_byte_identical(data_csv, bundle, tmp_path):
    again = tmp_path / "again"
    assert cli.main(["fit", str(data_csv), "--out", str(again), "--seed", "3",
                     "--dump-matches"]) == 0
    for name in ("tree.json", "scores.json", "grid.csv", "matches.csv", "tree.txt"):
        assert (again / name).read_bytes() == (bundle / name).read_bytes()


def test_rerun_from_manifest_reproduces_everything(data_csv, bundle, tmp_path):
    again = tmp_path / "from_manifest"
    assert cli.main(["fit", str(data_csv), "--out", str(again), "--dump-matches",
                     "--config", str(bundle / "manifest.json")]) == 0
    for p in bundle.iterdir():
        assert (again / p.name).read_bytes() == p.read_bytes(), p.name


def test_missing_z_is_schema_error(data_csv, tmp_path, capsys):
    df = pd.read_csv(data_csv).drop(columns=["z"])
    bad = tmp_path / "noz.csv"
    df.to_csv(bad, index=False)
    assert cli.main(["fit", str(bad), "--out", str(tmp_path / "b")]) == 2
    assert "'z'" in capsys.readouterr().err


def test_invalid_rows_reported(data_csv, tmp_path, capsys):
    df = pd.read_csv(data_csv)
    df.loc[4, "z"] = 2
    bad = tmp_path / "bad.csv"
    df.to_csv(bad, index=False)
    assert cli.main(["fit", str(bad), "--out", str(tmp_path / "b")]) == 2
    assert "treatment not binary" in capsys.readouterr().err


def test_numerical_failure_exit_code(data_csv, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise ConvergenceError("propensity fit did not converge")
    monkeypatch.setattr(cli, "fit_pipeline", boom)
    assert cli.main(["fit", str(data_csv), "--out", str(tmp_path / "b")]) == 3


def test_predict_reproduces_training_leaves(data_csv, bundle, tmp_path):
    out = tmp_path / "pred.csv"
    assert cli.main(["predict", str(bundle), str(data_csv), "--out", str(out)]) == 0
    pred = pd.read_csv(out, float_precision="round_trip")
    assert list(pred.columns) == list(cli.PREDICTIONS_SCHEMA)
    fitted = fit_pipeline(read_csv(data_csv), PipelineConfig(seed=3))
    np.testing.assert_array_equal(pred["leaf"], fitted.tree.apply(fitted.scores))
    np.testing.assert_array_equal(pred["tau_hat"], fitted.tree.predict(fitted.scores))


def test_predict_duplicate_rows_and_missing_columns(data_csv, bundle, tmp_path):
    df = pd.read_csv(data_csv).iloc[[5, 5, 9]]
    src = tmp_path / "dup.csv"
    df.to_csv(src, index=False)
    out = tmp_path / "p.csv"
    assert cli.main(["predict", str(bundle), str(src), "--out", str(out)]) == 0
    pred = pd.read_csv(out)
    assert pred.iloc[0, 1:].tolist() == pred.iloc[1, 1:].tolist()
    df[["x1"]].to_csv(src, index=False)
    assert cli.main(["predict", str(bundle), str(src), "--out", str(out)]) == 2


def test_predict_hand_built_bundle(tmp_path):
    b = tmp_path / "hand"
    b.mkdir()
    # e = sigmoid(x1), p = x2
    (b / "scores.json").write_text(ScoreModel(np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                                              0.0, 0.0).to_json())
    tree = CateTree(Node(0, 40, 1.0, 0.5, axis=0, threshold=0.5,
                         left=Node(1, 20, 0.0, -0.25, 1), right=Node(2, 20, 0.0, 1.75, 1)))
    (b / "tree.json").write_text(tree.to_json())
    (b / "manifest.json").write_text(json.dumps({"input": {"columns": ["x1", "x2"]}}))
    x1 = np.log(0.2 / 0.8)  # e_hat = 0.2
    pd.DataFrame({"x1": [x1], "x2": [3.0]}).to_csv(tmp_path / "new.csv", index=False)
    assert cli.main(["predict", str(b), str(tmp_path / "new.csv"),
                     "--out", str(tmp_path / "o.csv")]) == 0
    row = pd.read_csv(tmp_path / "o.csv").iloc[0]
    assert row["e_hat"] == pytest.approx(0.2) and row["tau_hat"] == -0.25 and row["leaf"] == 1


def test_bootstrap_outputs(data_csv, tmp_path):
    out = tmp_path / "bs"
    assert cli.main(["bootstrap-ci", str(data_csv), "--b", "10", "--out", str(out),
                     "--threads", "1"]) == 0
    assert len((out / "intervals.csv").read_text().splitlines()) == 1001
    summary = json.loads((out / "summary.json").read_text())
    assert 0.0 <= summary["coverage"] <= 1.0 and summary["B"] == 10
    notau = tmp_path / "notau.csv"
    pd.read_csv(data_csv).drop(columns=["tau_true"]).to_csv(notau, index=False)
    out2 = tmp_path / "bs2"
    assert cli.main(["bootstrap-ci", str(notau), "--b", "10", "--out", str(out2),
                     "--threads", "1"]) == 0
    assert "coverage" not in json.loads((out2 / "summary.json").read_text())


def test_bench_and_sweep(tmp_path, capsys):
    rep = tmp_path / "r.json"
    assert cli.main(["bench", "--scenario", "1", "--n", "300", "--trials", "2",
                     "--methods", "pp,psm", "--out", str(rep), "--threads", "1"]) == 0
    obj = json.loads(rep.read_text())
    assert obj["schema_version"] == 1 and len(obj["mse"]["psm"]) == 2
    sw = tmp_path / "k.csv"
    assert cli.main(["sweep-k", "--n", "300", "--k-values", "1,3", "--trials", "1",
                     "--out", str(sw), "--threads", "1"]) == 0
    assert sw.read_text().splitlines()[0] == "K,mean_mse"
    with pytest.raises(SystemExit):
        cli.main(["bench", "--scenario", "1", "--methods", "forest", "--out", str(rep)])


def test_console_script(tmp_path):
    out = tmp_path / "s.csv"
    res = subprocess.run([sys.executable, "-m", "ppcate.cli", "simulate", "--scenario", "5",
                          "--n", "50", "--d", "10", "--out", str(out)],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert pd.read_csv(out)["z"].sum() == 25
