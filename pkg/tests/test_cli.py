from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from nsde import bench, synth
from nsde.cli import main
from nsde.market import CALL, Contract, MarketSnapshot, export_snapshot
from nsde.models.sde import BlackScholes, load_model, save_model

import datetime as dt

BS_DAY = str(synth.bundled_paths()["bs"][0])
HESTON_DAY = str(synth.bundled_paths()["heston"][0])


@pytest.fixture
def atm_files(tmp_path):
    ck = tmp_path / "bs.json"
    save_model(ck, BlackScholes(0.2))
    snap = MarketSnapshot(dt.date(2020, 1, 2), 100.0, 0.0, 0.0, (Contract(CALL, 100.0, 365, 8.0),))
    contracts = tmp_path / "atm.csv"
    export_snapshot(snap, contracts)
    return ck, contracts


def test_calibrate_exit_codes(tmp_path):
    args = ["calibrate", "--data", BS_DAY, "--model", "bs", "--engine", "pde", "--lr", "0.02", "--set", "sigma=0.3"]
    assert main(args + ["--max-iters", "200", "--patience", "25", "--out", str(tmp_path / "a")]) == 0
    fitted = load_model(tmp_path / "a" / "model.json")
    assert float(fitted.sigma) == pytest.approx(0.2, abs=0.01)
    hist = (tmp_path / "a" / "history.csv").read_text().splitlines()
    assert hist[0] == "iter,train_mse,grad_norm,lr" and len(hist) > 5
    assert main(args + ["--max-iters", "2", "--out", str(tmp_path / "b")]) == 2


def test_zero_iterations_keeps_initialization(tmp_path):
    assert main(["calibrate", "--data", BS_DAY, "--model", "2dnn", "--engine", "mc", "--max-iters", "0",
                 "--seed", "4", "--out", str(tmp_path)]) == 2
    saved = load_model(tmp_path / "model.json")
    snap = synth.load_bundled("bs")[0]
    fresh = bench.ModelSpec("2dnn", {}, 4).build(snap)
    np.testing.assert_array_equal(saved.params, fresh.params)
    assert (tmp_path / "history.csv").read_text() == "iter,train_mse,grad_norm,lr\n"


def test_missing_file_is_reported(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert main(["calibrate", "--data", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_price_atm_call(atm_files, capsys):
    ck, contracts = atm_files
    assert main(["price", "--checkpoint", str(ck), "--contracts", str(contracts), "--n-s", "400"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "id,price,stderr_or_disc_est"
    cid, price, est = out[1].split(",")
    assert cid == "EC-K100-T365" and float(price) == pytest.approx(7.9656, abs=5e-3) and float(est) >= 0


def test_price_monte_carlo_is_deterministic(atm_files, tmp_path):
    ck, contracts = atm_files
    outs = []
    for name in ("a.csv", "b.csv"):
        p = tmp_path / name
        assert main(["price", "--checkpoint", str(ck), "--contracts", str(contracts), "--engine", "mc",
                     "--eval-L", "50000", "--seed", "2", "--out", str(p)]) == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]
    _, price, stderr = outs[0].decode().splitlines()[1].split(",")
    assert abs(float(price) - 7.965567455405804) <= 4 * float(stderr)


def test_price_empty_file(atm_files, tmp_path, capsys):
    ck, contracts = atm_files
    empty = tmp_path / "empty.csv"
    empty.write_text(contracts.read_text().splitlines()[0] + "\n")
    assert main(["price", "--checkpoint", str(ck), "--contracts", str(empty)]) == 0
    assert capsys.readouterr().out == "id,price,stderr_or_disc_est\n"


def test_price_american_with_monte_carlo_fails(atm_files, capsys):
    ck, _ = atm_files
    assert main(["price", "--checkpoint", str(ck), "--contracts", HESTON_DAY, "--engine", "mc"]) == 1
    assert "pde" in capsys.readouterr().err


def test_experiment_and_plot_export(tmp_path, monkeypatch):
    monkeypatch.setenv("NSDE_SEED", "6")
    cfg = tmp_path / "cfg.toml"
    cfg.write_text('[experiment]\nmax_iters = 2\nL = 256\neval_L = 2000\n[hyper]\nsigma = 0.25\n')
    assert main(["experiment", "--experiment", "intraday", "--engine", "mc", "--config", str(cfg),
                 "--out", str(tmp_path)]) == 0
    report = tmp_path / "intraday_2020-01-02_6.json"
    obj = json.loads(report.read_text())
    bench.validate_report(obj)
    assert obj["seed"] == 6 and obj["engine"] == "mc-sgd"
    assert (tmp_path / "intraday_2020-01-02_6_agg.csv").read_text().startswith("group,n,mse,mae,rel_mae\n")
    assert main(["export-plots", "--report", str(report), "--out", str(tmp_path / "plots")]) == 0
    points = (tmp_path / "plots" / "intraday_2020-01-02_6_points.csv").read_text().splitlines()
    assert points[0] == "variant,date,split,id,payoff,style,market,model,abs_err,rel_err"
    assert len(points) == len(obj["rows"]) + 1
    assert (tmp_path / "plots" / "intraday_2020-01-02_6_daily.csv").exists()


def test_cross_payoff_without_puts(tmp_path, capsys):
    calls = tmp_path / "calls.csv"
    export_snapshot(synth.load_bundled("bs")[0].calls(), calls)
    assert main(["experiment", "--experiment", "cross-payoff", "--data", str(calls), "--max-iters", "1",
                 "--out", str(tmp_path)]) == 1
    assert "no put contracts in the data" in capsys.readouterr().err


def test_hedge_gbm_world(tmp_path):
    assert main(["hedge", "--world", "gbm", "--seed", "1", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "hedge_summary.json").read_text())
    assert summary["baseline_rel_mae"] >= 5 * summary["rel_mae"]
    assert (tmp_path / "hedge_report.csv").read_text().startswith("date,contract_id,delta,dP,dS,abs_err\n")


def test_hedge_bundled_closed_form(tmp_path):
    assert main(["hedge", "--bundled", "bs", "--method", "bs", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "hedge_summary.json").read_text())
    assert summary["mae"] < summary["baseline_mae"]


def test_synth_writes_days(tmp_path, capsys):
    assert main(["synth", "--kind", "bs", "--out", str(tmp_path)]) == 0
    written = sorted(Path(p).name for p in capsys.readouterr().out.split())
    assert written == [p.name for p in synth.bundled_paths()["bs"]]
    for p in synth.bundled_paths()["bs"]:
        assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_bad_arguments(tmp_path):
    assert main(["calibrate", "--data", BS_DAY, "--set", "sigma"]) == 1
    assert main(["calibrate", "--data", BS_DAY, "--config", str(tmp_path / "none.toml")]) == 1
    assert main(["calibrate", "--data", BS_DAY, "--model", "quantum", "--out", str(tmp_path)]) == 1
    with pytest.raises(SystemExit):
        main(["calibrate", "--engine", "abacus"])
