from __future__ import annotations

import datetime as dt
import json
import math

import numpy as np
import pytest

from nsde import bench, pde, synth
from nsde.bench import AggRow, ContractRow, Experiment, ModelSpec
from nsde.errors import ExperimentError
from nsde.market import MarketSnapshot
from nsde.models.sde import BlackScholes
from nsde.sgd import SgdConfig

QUICK_PDE = pde.PdeCalConfig(learning_rate=0.02, max_iters=3, patience=3)


def row(market, model, variant="model", split="test", payoff="C", date="2020-01-02", id="x"):
    err = model - market
    return ContractRow(variant, date, split, id, payoff, "E", market, model, 0.0, abs(err), err * err,
                       abs(err) / market if market > 0 else math.nan)


def test_single_contract_aggregate():
    (g, overall) = bench.aggregate([row(10.0, 11.0)])
    assert (g.n, g.mse, g.mae, g.rel_mae) == (1, 1.0, 1.0, 10.0)
    assert overall.group == {} and overall.mse == 1.0


def test_groups_and_overall_average():
    rows = [row(10.0, 11.0), row(4.0, 6.0), row(5.0, 5.5, payoff="P")]
    calls, puts, overall = bench.aggregate(rows)
    assert calls.group == {"payoff": "C", "split": "test"} and calls.n == 2
    assert calls.mse == pytest.approx(2.5) and calls.mae == pytest.approx(1.5)
    assert calls.rel_mae == pytest.approx(30.0)
    assert puts.mae == pytest.approx(0.5) and puts.rel_mae == pytest.approx(10.0)
    assert overall.n == 3 and overall.mae == pytest.approx(3.5 / 3)
    assert overall.rel_mae == pytest.approx((10 + 50 + 10) / 3)
    assert overall.mae**2 <= overall.mse
    text = bench.aggregates_csv([calls, overall])
    assert text.splitlines()[0] == "group,n,mse,mae,rel_mae"
    assert text.splitlines()[1].startswith("payoff=C;split=test,2,")
    assert text.splitlines()[2].startswith("overall,3,")


def test_zero_market_price_left_out_of_rel_mae():
    (_, overall) = bench.aggregate([row(0.0, 1.0), row(2.0, 3.0)])
    assert overall.rel_mae == pytest.approx(50.0) and overall.mae == 1.0


@pytest.mark.parametrize("exp", [Experiment("sideways"), Experiment("intraday", engine="gpu"),
                                 Experiment("euro-to-american", engine="mc-sgd")])
def test_invalid_experiments(exp):
    with pytest.raises(ExperimentError):
        exp.validate()


def test_unknown_model_kind():
    with pytest.raises(ExperimentError):
        ModelSpec("dupire").build(synth.load_bundled("bs")[0])


def test_cross_payoff_needs_puts():
    snap = synth.load_bundled("bs")[0]
    calls_only = snap.calls()
    with pytest.raises(ExperimentError, match="no put contracts in the data"):
        bench.run(Experiment("cross-payoff", engine="pde", pde_cal=QUICK_PDE), [calls_only])


def test_early_exercise_needs_pde():
    heston = synth.load_bundled("heston")[0]
    with pytest.raises(ExperimentError):
        bench.train(BlackScholes(0.2), heston, Experiment("intraday", engine="mc-sgd"))


def test_data_generating_model_within_noise_floor():
    snap = synth.load_bundled("bs")[0]
    w = synth.BsWorld()
    m = BlackScholes(w.sigma, rate=snap.rate, dividend=snap.dividend, spot=snap.spot)
    market = np.array([c.market_price for c in snap.contracts])
    p, e = bench.evaluate(m, snap, Experiment("intraday", engine="pde"))
    assert np.mean((p - market) ** 2) <= np.mean(e**2)
    # Monte Carlo errors share paths across contracts, so the floor is checked contract by contract
    p, e = bench.evaluate(m, snap, Experiment("intraday", engine="mc-sgd", eval_L=100_000))
    assert np.all(np.abs(p - market) <= 4 * e + 1e-12)


def test_cross_payoff_transfer_on_black_scholes_world():
    snap = synth.bs_snapshot(dt.date(2020, 1, 2), strikes=(90.0, 95.0, 100.0, 105.0, 110.0), maturities=(91, 182))
    exp = Experiment("cross-payoff", ModelSpec("bs", {"sigma": 0.3}), engine="pde",
                     pde_cal=pde.PdeCalConfig(learning_rate=0.02, max_iters=100, patience=100))
    rep = bench.run(exp, [snap])
    test = next(a for a in rep.aggregates if a.group.get("split") == "test")
    assert test.group["payoff"] == "P" and test.n == 10
    assert test.rel_mae <= 2.0
    assert bench.aggregate(rep.rows, ("variant", "payoff", "split")) == rep.aggregates


def test_recalibration_keeps_frozen_model():
    exp = Experiment("recalibration", ModelSpec("bs", {"sigma": 0.3}), engine="pde", pde_cal=QUICK_PDE)
    rep = bench.run(exp, synth.load_bundled("bs"))
    frozen, recal = rep.param_hashes["frozen"], rep.param_hashes["recalibrated"]
    assert len(frozen) == len(recal) == 3
    assert len(set(frozen)) == 1 and len(set(recal)) == 3 and frozen[0] == recal[0]
    assert {r.variant for r in rep.rows} == {"frozen", "recalibrated"}
    assert {r.split for r in rep.rows} == {"test"}
    assert len(rep.daily) == 6
    with pytest.raises(ExperimentError):
        bench.run(exp, synth.load_bundled("bs")[:1])


def test_report_files_and_schema(tmp_path):
    exp = Experiment("intraday", ModelSpec("bs", {"sigma": 0.3}), engine="mc-sgd", seed=3, eval_L=2000,
                     sgd=SgdConfig(L=256, learning_rate=0.01, max_iters=3, seed=3))
    days = synth.load_bundled("bs")
    rep = bench.run(exp, days)
    jp, cp = bench.write_report(rep, tmp_path)
    assert jp.name == "intraday_2020-01-02_3.json" and cp.name == "intraday_2020-01-02_3_agg.csv"
    obj = json.loads(jp.read_text())
    bench.validate_report(obj)
    assert set(obj["noise_floor"]) == {"model/train", "model/test"}
    jp2, _ = bench.write_report(bench.run(exp, days), tmp_path / "again")
    assert jp2.read_bytes() == jp.read_bytes()
    bad = dict(obj, format="other")
    with pytest.raises(ExperimentError):
        bench.validate_report(bad)
    bad = dict(obj, rows=[dict(obj["rows"][0], split="holdout")])
    with pytest.raises(ExperimentError):
        bench.validate_report(bad)
    bad = {k: v for k, v in obj.items() if k != "daily"}
    with pytest.raises(ExperimentError):
        bench.validate_report(bad)


def test_protocol_needs_enough_days():
    with pytest.raises(ExperimentError):
        bench.run(Experiment("next-day", engine="pde", pde_cal=QUICK_PDE), synth.load_bundled("bs")[:1])
    empty = MarketSnapshot(dt.date(2020, 1, 2), 100.0, 0.0, 0.0, ())
    with pytest.raises(ExperimentError):
        bench.train(BlackScholes(0.2), empty, Experiment("intraday"))
