import csv
import json

import numpy as np
import pytest

from latentjm.cli import main
from latentjm.data import load_dataset
from latentjm.em import FitResult

from conftest import small_scenario


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    small_scenario(n=50, J=2, k=1, r=1).save(d / "scenario.json")
    assert main(["simulate", "--scenario-file", str(d / "scenario.json"), "--seed", "3",
                 "--out", str(d / "data")]) == 0
    cfg = {"model": {"k": 1, "basis": {"n_knots": 2, "domain": [0.0, 6.0]}},
           "fit": {"max_iters": 300}, "seed": 1}
    (d / "config.json").write_text(json.dumps(cfg))
    return d


def _data(d):
    return ["--longitudinal", str(d / "data" / "longitudinal.csv"),
            "--survival", str(d / "data" / "survival.csv")]


def test_simulate_outputs(workdir):
    truth = json.loads((workdir / "data" / "truth.json").read_text())
    assert truth["seed"] == 3 and truth["truth"]["gamma"] == 0.3
    assert len(_rows(workdir / "data" / "survival.csv")) == 50


def test_simulate_deterministic(workdir, tmp_path):
    main(["simulate", "--scenario-file", str(workdir / "scenario.json"), "--seed", "3",
          "--out", str(tmp_path)])
    for name in ("longitudinal.csv", "survival.csv"):
        assert (tmp_path / name).read_text() == (workdir / "data" / name).read_text()


@pytest.fixture(scope="module")
def fitted(workdir):
    out = workdir / "fit.json"
    code = main(["fit", *_data(workdir), "--config", str(workdir / "config.json"),
                 "--out", str(out)])
    assert code == 0
    return out


def test_fit_writes_loadable_outputs(fitted, workdir, capsys):
    res = FitResult.load(fitted)
    d = json.loads(fitted.read_text())
    assert d["spec"]["k"] == 1 and d["spec"]["p"] == [1, 1] and d["spec"]["r"] == 1
    assert isinstance(d["converged"], bool)
    assert res.aic == pytest.approx(-2 * res.loglik + 2 * res.n_params)
    hz = _rows(workdir / "fit_hazard.csv")
    assert len(hz) == res.params.hazard.size
    assert np.all(np.diff([float(r["cumulative_hazard"]) for r in hz]) >= 0)
    curves = _rows(workdir / "fit_curves.csv")
    assert list(curves[0]) == ["time", "mean", "pc_1"]


def test_fit_not_converged_is_success(workdir, tmp_path):
    out = tmp_path / "short.json"
    code = main(["fit", *_data(workdir), "--config", str(workdir / "config.json"),
                 "--max-iters", "2", "--out", str(out)])
    assert code == 0
    assert json.loads(out.read_text())["converged"] is False


def test_missing_file_exit_2(workdir, tmp_path, capsys):
    code = main(["fit", "--longitudinal", str(workdir / "data" / "longitudinal.csv"),
                 "--survival", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "x.json")])
    assert code == 2
    assert "nope.csv" in capsys.readouterr().err


def test_parse_error_exit_2(workdir, tmp_path, capsys):
    bad = tmp_path / "long.csv"
    text = (workdir / "data" / "longitudinal.csv").read_text().splitlines()
    parts = text[3].split(",")
    parts[3] = "oops"
    text[3] = ",".join(parts)
    bad.write_text("\n".join(text) + "\n")
    code = main(["fit", "--longitudinal", str(bad), "--survival",
                 str(workdir / "data" / "survival.csv"), "--config",
                 str(workdir / "config.json"), "--out", str(tmp_path / "x.json")])
    assert code == 2
    assert "row 4" in capsys.readouterr().err


def test_invalid_config_exit_2(workdir, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert main(["fit", *_data(workdir), "--config", str(cfg),
                 "--out", str(tmp_path / "x.json")]) == 2


def test_fit_failure_exit_3(workdir, tmp_path, capsys):
    cfg = json.loads((workdir / "config.json").read_text())
    # knots between every pair of visits leave some coefficients without data
    cfg["model"]["basis"]["n_knots"] = 40
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    code = main(["fit", *_data(workdir), "--config", str(p), "--out", str(tmp_path / "x.json")])
    assert code == 3
    assert "fit failed" in capsys.readouterr().err


def test_scan(workdir, fitted, tmp_path):
    out = tmp_path / "scan.csv"
    code = main(["scan", *_data(workdir), "--config", str(workdir / "config.json"),
                 "--knots", "1,2", "--ranks", "1", "--out", str(out)])
    assert code == 0
    rows = _rows(out)
    assert [r["knots"] for r in rows] == ["1", "2"]
    for r in rows:
        assert float(r["AIC"]) == pytest.approx(-2 * float(r["loglik"]) + 2 * int(r["n_params"]))
    assert sum(r["best"] == "*" for r in rows) == 1
    # the knots=2 row reproduces the single fit
    res = FitResult.load(fitted)
    assert float(rows[1]["loglik"]) == pytest.approx(res.loglik, rel=1e-12)
    assert int(rows[1]["n_params"]) == res.n_params


def test_predict_and_evaluate(workdir, fitted, tmp_path):
    q = tmp_path / "q.csv"
    q.write_text("id,s,t\ns1,1.0,0.0\ns1,1.0,1.0\ns1,1.0,2.0\ns2,0.5,1.5\n")
    out = tmp_path / "pred.csv"
    assert main(["predict", *_data(workdir), "--params", str(fitted), "--queries", str(q),
                 "--out", str(out)]) == 0
    probs = [float(r["probability"]) for r in _rows(out)]
    assert probs[0] == 0.0 and probs[0] <= probs[1] <= probs[2] <= 1.0
    ev = tmp_path / "err.csv"
    assert main(["evaluate", *_data(workdir), "--params", str(fitted), "--s", "1.0",
                 "--t", "1.5", "--out", str(ev)]) == 0
    (row,) = _rows(ev)
    assert 0.0 <= float(row["err"]) <= 1.0
    subs = load_dataset(workdir / "data" / "longitudinal.csv", workdir / "data" / "survival.csv",
                        FitResult.load(fitted).spec)
    assert int(row["n_risk"]) == sum(s.event_time > 1.0 for s in subs)


def test_predict_unknown_id(workdir, fitted, tmp_path):
    q = tmp_path / "q.csv"
    q.write_text("id,s,t\nnobody,1.0,1.0\n")
    assert main(["predict", *_data(workdir), "--params", str(fitted), "--queries", str(q),
                 "--out", str(tmp_path / "p.csv")]) == 2


def test_bootstrap_cmd(workdir, tmp_path):
    out = tmp_path / "boot.csv"
    code = main(["bootstrap", *_data(workdir), "--config", str(workdir / "config.json"),
                 "--B", "2", "--max-iters", "40", "--out", str(out)])
    assert code == 0
    rows = _rows(out)
    assert rows[-1]["parameter"] == "gamma"
    assert all(r["p_value"] == "" for r in rows if r["parameter"].startswith(("sigma2", "D_")))


def test_replicate_cmd(workdir, tmp_path):
    out = tmp_path / "rep.csv"
    code = main(["replicate", "--scenario-file", str(workdir / "scenario.json"), "--n", "30",
                 "--reps", "2", "--rank", "1", "--max-iters", "40", "--seed", "0",
                 "--out", str(out)])
    assert code == 0
    assert {"parameter", "truth", "bias", "sd"} == set(_rows(out)[0])
