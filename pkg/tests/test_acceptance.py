"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL`` line (also collected into the
terminal summary) before asserting, so a failing criterion is visible even
when the run is interrupted.
"""

from __future__ import annotations

import datetime as dt
import json
import math
import time
from dataclasses import dataclass

import numpy as np
import pytest

import nsde.net as nx
from nsde import bench, hedge, pde, synth
from nsde.bench import Experiment, ModelSpec
from nsde.hedge import GbmWorld, HedgeRecord, hedge_errors
from nsde.market import AMERICAN, CALL, PUT, Contract, MarketSnapshot
from nsde.mc import TimeGrid, price_streaming
from nsde.models.closed_form import bs_delta, bs_price
from nsde.models.dupire import NnlvConfig, dupire_local_vol, nnlv_fit
from nsde.models.sde import BlackScholes, CustomSde, TwoDNN
from nsde.rng import audit_keys
from nsde.sgd import SgdConfig, calibrate, grad_biased, grad_unbiased

import conftest
from oracles import bs_call_put, central_diff, crr, rel_err, toy_gradient

pytestmark = pytest.mark.slow


def verdict(n: int | str, ok: bool, detail: str, started: float) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail}; {time.perf_counter() - started:.1f} s)"
    print(line)
    conftest.VERDICTS.append(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. unbiased two-batch gradient


@dataclass(frozen=True)
class Square:
    market_price: float
    maturity: float = 1.0

    def payoff_value(self, s):
        return s * s


def test_criterion_1_unbiased_gradient():
    t0 = time.perf_counter()
    m = CustomSde(lambda s, y, t, th: (0.0 * s, th[0] + 0.0 * s, 0.0, 0.0, 0.0), [0.5], spot=0.0)
    m.absorbing = False  # arithmetic Brownian motion started at 0
    snap = MarketSnapshot(dt.date(2020, 1, 2), 0.0, 0.0, 0.0, (Square(0.5),))
    grid, cfg = TimeGrid(1.0, 1), SgdConfig(L=2, normalize=False)
    unbiased = np.array([grad_unbiased(m, grid, cfg, snap, seed=k).vector[0] for k in range(100_000)])
    biased = np.array([grad_biased(m, grid, cfg, snap, seed=10**6 + k).vector[0] for k in range(20_000)])
    exact = toy_gradient(0.5, 0.5)
    band = 3.2905 * unbiased.std(ddof=1) / math.sqrt(unbiased.size)  # two-sided 99.9%
    inside = abs(unbiased.mean() - exact) <= band
    outside = abs(biased.mean() - exact) > band
    verdict(1, inside and outside, f"two-batch mean {unbiased.mean():.4f}, single-batch {biased.mean():.4f}, "
            f"target {exact} +/- {band:.4f}", t0)


# ---------------------------------------------------------------------------
# 2. gradients against central differences


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    net = nx.Mlp((1, 3, 1))
    pv = nx.init_params(net, 2)
    assert pv.values.size == 10
    x = np.linspace(-1.0, 1.0, 7).reshape(-1, 1)

    def loss(th):
        y = nx.mlp_forward(net, th, x)
        return ((y - 0.25) * (y - 0.25)).sum()

    tape = nx.Tape()
    th = tape.variable(pv.values)
    g_mlp = nx.grad(tape, loss(th), th)
    e_mlp = rel_err(g_mlp, central_diff(lambda v: float(loss(v)), pv.values, 1e-5), floor=1e-8)

    def coeffs(s, y, t, th):
        out = nx.mlp_forward(net, th, (s * (1.0 / 100.0)).reshape(-1, 1))[:, 0]
        return (0.01 * s, (nx.softplus(out) * 0.2 + 0.05) * s, 0.0 * s, 0.0 * s, 0.0)

    m = CustomSde(coeffs, pv.values + 0.1, spot=100.0, rate=0.01, time_homogeneous=True)
    snap = MarketSnapshot(dt.date(2020, 1, 2), 100.0, 0.01, 0.0,
                          (Contract(PUT, 105.0, 20, 6.0, AMERICAN), Contract(CALL, 95.0, 20, 7.0)))
    cfg = pde.PdeConfig(n_s=40, s_max=200.0, steps_per_day=5)
    grid = pde.build_grid(m, list(snap.contracts), 100.0, cfg)
    tape = nx.Tape()
    th = tape.variable(m.params)
    obj, _ = pde.pde_objective(m, snap, "mse", config=cfg, theta=th, grid=grid)
    g_pde = nx.grad(tape, obj, th)
    fd = central_diff(lambda v: float(pde.pde_objective(m, snap, "mse", theta=v, grid=grid)[0]), m.params, 1e-6)
    e_pde = rel_err(g_pde, fd, floor=1e-9)
    ok = e_mlp <= 1e-5 and e_pde <= 1e-3 and grid.time.steps == 100
    verdict(2, ok, f"MLP rel err {e_mlp:.2e}, PDE rel err {e_pde:.2e} over {grid.time.steps} steps", t0)


# ---------------------------------------------------------------------------
# 3. and 4. PDE against closed form and binomial tree

BS_CASE = dict(s0=100.0, k=100.0, t=1.0, r=0.05, d=0.0, sigma=0.2)


def test_criterion_3_european_pde():
    t0 = time.perf_counter()
    ref = bs_call_put(*BS_CASE.values(), "C")
    c = [Contract(CALL, 100.0, 365, 0.0)]
    m = BlackScholes(0.2, rate=0.05, spot=100.0)
    prices = [float(pde.price(m, c, 100.0, 0.05, pde.PdeConfig(n_s=n, s_max=400.0)).price_values()[0])
              for n in (400, 800)]
    errs = [abs(p - ref) for p in prices]
    ratio = errs[0] / errs[1]
    ok = errs[1] / ref <= 5e-3 and errs[0] / ref <= 5e-3 and ratio >= 3.5
    verdict(3, ok, f"price {prices[1]:.5f} vs {ref:.5f}, error ratio {ratio:.2f}", t0)


def test_criterion_4_american_pde():
    t0 = time.perf_counter()
    ref = crr(100.0, 100.0, 1.0, 0.05, 0.0, 0.2, 2000, payoff="P", american=True)
    m = BlackScholes(0.2, rate=0.05, spot=100.0)
    p = float(pde.price(m, [Contract(PUT, 100.0, 365, 0.0, AMERICAN)], 100.0, 0.05,
                        pde.PdeConfig(n_s=400, s_max=400.0)).price_values()[0])
    verdict(4, abs(p - ref) / ref <= 0.01, f"PDE {p:.5f} vs tree {ref:.5f}", t0)


# ---------------------------------------------------------------------------
# 5. Monte Carlo and PDE on the same network model


def test_criterion_5_engine_consistency():
    t0 = time.perf_counter()
    m = TwoDNN(hidden=(32, 32), price_scale=20.0, rho=-0.3, y0=0.1, rate=0.02, spot=100.0, seed=3)
    contracts = [Contract(CALL, 105.0, 91, 0.0), Contract(CALL, 110.0, 91, 0.0), Contract(PUT, 112.0, 91, 0.0),
                 Contract(CALL, 105.0, 60, 0.0), Contract(PUT, 108.0, 60, 0.0)]
    p_pde = pde.price(m, contracts, 100.0, 0.02,
                      pde.PdeConfig(n_s=600, n_y=40, s_max_factor=1.6, y_range=(-2.0, 2.0))).price_values()
    mc = price_streaming(m, TimeGrid.for_contracts(contracts), contracts, 1_000_000, 11, 0.02, s0=100.0)
    tol = np.maximum(3 * mc.stderr, 0.01 * np.abs(mc.price))
    gap = np.abs(p_pde - mc.price)
    detail = ", ".join(f"{c.id} {a:.4f}/{b:.4f}" for c, a, b in zip(contracts, p_pde, mc.price))
    verdict(5, bool(np.all(gap <= tol)), f"pde/mc {detail}; worst gap/tol {np.max(gap / tol):.2f}", t0)


# ---------------------------------------------------------------------------
# 6. calibration recovery


def test_criterion_6a_sigma_recovery():
    t0 = time.perf_counter()
    snap = synth.load_bundled("bs")[0]
    truth = synth.BsWorld().sigma
    m = BlackScholes(0.3, rate=snap.rate, dividend=snap.dividend, spot=snap.spot)
    cfg = SgdConfig(L=4096, learning_rate=lambda k: 0.02 / (1.0 + k / 25.0), max_iters=300, seed=1,
                    patience=1000, eval_every=10)
    s_mc = float(calibrate(m, None, cfg, snap).model.sigma)
    pcfg = pde.PdeCalConfig(pde.PdeConfig(n_s=200, s_max_factor=3.0), learning_rate=0.01, max_iters=150,
                            patience=150)
    s_pde = float(pde.calibrate_pde(m, snap, "mse", None, pcfg).model.sigma)
    ok = abs(s_mc - truth) <= 0.005 and abs(s_pde - truth) <= 0.002
    verdict("6a", ok, f"MC-SGD sigma {s_mc:.5f}, PDE sigma {s_pde:.5f}, truth {truth}", t0)


def test_criterion_6b_local_vol_from_fitted_surface():
    t0 = time.perf_counter()
    sigma, s0 = 0.2, 100.0
    kk, tt = np.meshgrid(np.linspace(60, 140, 41), np.linspace(0.25, 1.5, 30), indexing="ij")
    targets = np.stack([kk.ravel(), tt.ravel(), bs_price(s0, kk, tt, 0.0, 0.0, sigma, "C").ravel()], -1)
    cfg = NnlvConfig(hidden=(32, 32), epochs=50_000, optimizer="lbfgs", k_center=1.0, k_gain=4.0, t_center=0.9)
    fit = nnlv_fit(targets, s0, cfg)
    ki, ti = np.meshgrid(np.linspace(85, 115, 7), np.linspace(0.4, 1.2, 5), indexing="ij")
    var = dupire_local_vol(fit.surface(), ki.ravel(), ti.ravel(), 0.0, 0.0).variance
    worst = float(np.max(np.abs(var - sigma**2)))
    verdict("6b", worst <= 1e-3, f"max |local variance - sigma^2| = {worst:.2e} at {var.size} interior nodes", t0)


# ---------------------------------------------------------------------------
# 7. path accounting


def test_criterion_7_shared_paths():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    contracts = tuple(Contract(CALL if i % 2 else PUT, float(k), int(d), 1.0)
                      for i, (k, d) in enumerate(zip(rng.uniform(80, 120, 100).round(1), rng.integers(5, 40, 100))))
    snap = MarketSnapshot(dt.date(2020, 1, 2), 100.0, 0.01, 0.0, contracts)
    grid = TimeGrid.for_contracts(contracts)
    L = 500
    with audit_keys() as log:
        grad_unbiased(BlackScholes(0.2).with_market(0.01, 0.0, 100.0), grid, SgdConfig(L=L), snap)
    paths = log.paths()
    ok = paths == set(range(2 * L)) and len(log.keys) == 2 * grid.steps
    verdict(7, ok, f"{len(contracts)} contracts, {len(paths)} distinct paths for L = {L}", t0)


# ---------------------------------------------------------------------------
# 8. hedging


def test_criterion_8_hedging():
    t0 = time.perf_counter()
    day = dt.date(2020, 1, 2)
    recs = [HedgeRecord(day, 8.0, 10.0, 100.0, 102.0, 0.5), HedgeRecord(day, 4.0, 3.0, 100.0, 98.0, 0.25),
            HedgeRecord(day, 2.0, 2.5, 50.0, 50.0, 0.75)]
    e = hedge_errors(recs)  # errors 1, -0.5, 0.5; relative 1/8, 1/8, 1/4
    fixture_ok = e.mae == 2.0 / 3.0 and e.mse == 0.5 and e.rel_mae == pytest.approx(50.0 / 3.0, rel=1e-15)
    c = Contract(CALL, 100.0, 365, 0.0)
    ref = float(bs_delta(100.0, 100.0, 1.0, 0.0, 0.0, 0.2))
    mc = hedge.delta(BlackScholes(0.2, spot=100.0), c, 100.0, h=0.5, method="mc", seed=5, L=1_000_000)
    w = GbmWorld()
    hedged, naked = hedge_errors(w.records(0)).rel_mae, hedge_errors(w.records(0, hedge=False)).rel_mae
    ok = fixture_ok and abs(mc - ref) <= 0.01 and naked >= 5 * hedged
    verdict(8, ok, f"fixture {'exact' if fixture_ok else 'wrong'}, MC delta {mc:.4f} vs {ref:.4f}, "
            f"relMAE hedged {hedged:.3g}% vs unhedged {naked:.3g}%", t0)


# ---------------------------------------------------------------------------
# 9. protocol suite


def _suite_experiment(kind: str) -> Experiment:
    sgd = SgdConfig(L=512, learning_rate=5e-3, max_iters=15, seed=2)
    cal = pde.PdeCalConfig(learning_rate=1e-2, max_iters=10, patience=10)
    if kind == bench.EURO_TO_AMERICAN:
        return Experiment(kind, ModelSpec("heston"), bench.PDE_ENGINE, seed=2, pde_cal=cal,
                          pde_grid=pde.PdeConfig(n_s=60, n_y=12, s_max_factor=2.5, y_range=(0.0, 0.5)))
    if kind in (bench.CROSS_PAYOFF, bench.STRIKE_EXTRAPOLATION):
        return Experiment(kind, ModelSpec("bs", {"sigma": 0.3}), bench.PDE_ENGINE, seed=2, pde_cal=cal)
    return Experiment(kind, ModelSpec("2dnn", {"hidden": [8, 8], "price_scale": 20.0}), bench.MC_SGD, seed=2,
                      sgd=sgd, eval_L=5000)


def test_criterion_9_protocol_suite(tmp_path):
    t0 = time.perf_counter()
    problems = []
    for kind in bench.KINDS:
        data = synth.load_bundled("heston" if kind == bench.EURO_TO_AMERICAN else "bs")
        outputs = []
        for rep in ("a", "b"):
            report = bench.run(_suite_experiment(kind), data)
            jp, cp = bench.write_report(report, tmp_path / rep)
            bench.validate_report(json.loads(jp.read_text()))
            outputs.append((jp.read_bytes(), cp.read_bytes()))
        if outputs[0] != outputs[1]:
            problems.append(f"{kind} not byte-identical")
        if kind == bench.RECALIBRATION:
            frozen = report.param_hashes["frozen"]
            if len(frozen) != len(data) or len(set(frozen)) != 1:
                problems.append("frozen baseline changed")
    verdict(9, not problems, "; ".join(problems) or f"{len(bench.KINDS)} kinds ran twice, reports identical", t0)
