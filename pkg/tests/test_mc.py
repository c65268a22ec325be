from __future__ import annotations

import datetime as dt
import json
import math
from dataclasses import dataclass

import numpy as np
import pytest

import nsde.net as nx
from nsde.errors import ArgumentError, ContractGridError, SimulationError
from nsde.market import CALL, PUT, Contract, MarketSnapshot
from nsde.mc import TimeGrid, dump_paths, objective_mse, price_european, price_streaming, simulate
from nsde.models.sde import BlackScholes, CustomSde, Heston

from oracles import bs_call_put


def constant(mu=0.0, sigma=0.0, spot=100.0, **kw):
    return CustomSde(lambda s, y, t, th: (mu + 0 * s, sigma + 0 * s, 0.0, 0.0, 0.0), [], spot=spot, **kw)


@dataclass(frozen=True)
class Vanilla:
    """A vanilla claim with a maturity that is not a whole number of days."""

    payoff: str
    strike: float
    maturity: float


@dataclass(frozen=True)
class Straddle:
    strike: float
    maturity: float

    def payoff_value(self, s):
        return nx.maximum(s - self.strike, 0.0) + nx.maximum(self.strike - s, 0.0)


def test_zero_coefficients_keep_spot():
    b = simulate(constant(), TimeGrid(1.0, 12), 7, seed=0)
    assert np.all(b.S == 100.0)


def test_initial_states_are_exact():
    m = Heston(y0=0.05, spot=100.0)
    b = simulate(m, TimeGrid(0.5, 5), 10, seed=1)
    assert np.all(b.S[:, 0] == 100.0)
    assert np.allclose(b.Y[:, 0], 0.05, rtol=0, atol=1e-15)


def test_perfect_correlation_reuses_driver():
    m = CustomSde(lambda s, y, t, th: (0.0 * s, 0.1 + 0 * s, 0.0 * s, 0.1 + 0 * s, 1.0), [], dim=2, spot=1.0)
    b = simulate(m, TimeGrid(1.0, 4), 50, seed=3)
    np.testing.assert_array_equal(b.Z, b.W)


def test_correlated_driver_is_rebuilt_from_retained_draws():
    m = Heston(rho=-0.6, spot=100.0)
    b = simulate(m, TimeGrid(0.1, 3), 20, seed=9)
    rho = float(m.correlation())
    np.testing.assert_allclose(b.Z, rho * b.W + math.sqrt(1 - rho * rho) * b.Z_perp, rtol=0, atol=1e-15)


def test_bs_martingale():
    grid = TimeGrid(1.0, 8)
    b = simulate(BlackScholes(0.2, spot=100.0), grid, 1_000_000, seed=5, keep=[8], retain_draws=False)
    st = b.s_at(8)
    assert abs(st.mean() - 100.0) < 3 * st.std(ddof=1) / math.sqrt(st.size)


def test_deterministic_payoff_and_discounting():
    m = constant(spot=120.0)
    grid = TimeGrid(1.0, 4)
    b = simulate(m, grid, 3, seed=0)
    k = Contract(CALL, 100.0, 365, 0.0)
    assert float(price_european(b, [k], 0.0).values[0]) == 20.0
    assert float(price_european(b, [k], 0.05).values[0]) == pytest.approx(20 * math.exp(-0.05), abs=1e-12)
    assert 20 * math.exp(-0.05) == pytest.approx(19.0246, abs=1e-4)


def test_bs_call_price_within_clt_band():
    c = Contract(CALL, 100.0, 365, 0.0)
    res = price_streaming(BlackScholes(0.2, spot=100.0), TimeGrid(1.0, 100), [c], 1_000_000, seed=2, r=0.0)
    target = bs_call_put(100.0, 100.0, 1.0, 0.0, 0.0, 0.2)
    assert target == pytest.approx(7.965567, abs=1e-6)
    assert abs(res.price[0] - target) < 3 * res.stderr[0]


def test_put_call_parity_on_one_batch():
    r, d, T = 0.03, 0.01, 0.5
    m = BlackScholes(0.3, rate=r, dividend=d, spot=100.0)
    grid = TimeGrid.daily(T)
    cs = [Contract(CALL, 105.0, 182, 0.0), Contract(PUT, 105.0, 182, 0.0)]
    b = simulate(m, TimeGrid(182 / 365, 26), 1_000_000, seed=4, keep=[26], retain_draws=False)
    p = price_european(b, cs, r)
    T = 182 / 365
    parity = 100 * math.exp(-d * T) - 105 * math.exp(-r * T)
    diff = nx.value(p.values)
    # the call minus put payoff is linear in S_T, so its standard error is that of S_T
    se = math.exp(-r * T) * b.s_at(26).std(ddof=1) / math.sqrt(b.L)
    assert abs(diff[0] - diff[1] - parity) < 3.3 * se
    assert grid.steps == 182


def test_payoff_linearity_on_shared_paths():
    m = BlackScholes(0.25, spot=100.0)
    grid = TimeGrid(0.25, 10)
    b = simulate(m, grid, 20_000, seed=8)
    call = Vanilla("C", 100.0, 0.25)
    put = Vanilla("P", 100.0, 0.25)
    both = price_european(b, [call, put], 0.01).values
    straddle = price_european(b, [Straddle(100.0, 0.25)], 0.01).values
    assert float(straddle[0]) == pytest.approx(float(both[0] + both[1]), rel=1e-13)


def test_reproducible_and_path_stable():
    m = Heston(spot=100.0, rate=0.01)
    grid = TimeGrid(0.2, 6)
    a = simulate(m, grid, 64, seed=42)
    b = simulate(m, grid, 64, seed=42)
    np.testing.assert_array_equal(a.S, b.S)
    np.testing.assert_array_equal(a.Y, b.Y)
    small = simulate(m, grid, 10, seed=42)
    np.testing.assert_array_equal(small.S, a.S[:10])
    tail = simulate(m, grid, 14, seed=42, path_start=50)
    np.testing.assert_array_equal(tail.S, a.S[50:])


def test_streaming_is_chunk_stable():
    m = BlackScholes(0.2, spot=100.0)
    grid = TimeGrid(0.1, 5)
    c = [Vanilla("C", 100.0, 0.1)]
    a = price_streaming(m, grid, c, 10_000, seed=1, r=0.0, chunk=1000)
    b = price_streaming(m, grid, c, 10_000, seed=1, r=0.0, chunk=1000)
    one = price_european(simulate(m, grid, 10_000, seed=1), c, 0.0)
    assert a.chunks == 10
    np.testing.assert_array_equal(a.price, b.price)
    np.testing.assert_allclose(a.price, nx.value(one.values), rtol=1e-12)
    np.testing.assert_allclose(a.stderr, one.stderr, rtol=1e-9)


def test_off_grid_maturity():
    b = simulate(constant(), TimeGrid(1.0, 4), 2, seed=0)
    with pytest.raises(ContractGridError):
        price_european(b, [Contract(CALL, 100.0, 100, 0.0)], 0.0)
    snapped = price_european(b, [Contract(CALL, 100.0, 100, 0.0)], 0.0, snap=True)
    assert len(snapped) == 1


def test_absorption_at_zero():
    m = constant(mu=-50.0, spot=1.0)
    b = simulate(m, TimeGrid(1.0, 10), 3, seed=0)
    assert np.all(b.S >= 0.0)
    assert np.all(b.S[:, -1] == 0.0)


def test_non_finite_state():
    m = CustomSde(lambda s, y, t, th: (np.where(s > 1.45, np.inf, 1.0), 0 * s, 0.0, 0.0, 0.0), [], spot=1.0)
    with pytest.raises(SimulationError) as e:
        simulate(m, TimeGrid(1.0, 10), 2, seed=0)
    assert e.value.path == 0 and e.value.step == 6


def test_bad_path_count():
    with pytest.raises(ArgumentError):
        simulate(constant(), TimeGrid(1.0, 1), 0, seed=0)
    with pytest.raises(ArgumentError):
        TimeGrid(0.0, 3)


def test_antithetic_pairs_mirror():
    b = simulate(BlackScholes(0.2, spot=100.0), TimeGrid(0.1, 3), 8, seed=0, antithetic=True)
    np.testing.assert_array_equal(b.W[:, :4], -b.W[:, 4:])


def snapshot(contracts, spot=100.0):
    return MarketSnapshot(dt.date(2020, 1, 1), spot, 0.0, 0.0, tuple(contracts))


def test_objective_examples():
    m = constant(spot=120.0)
    grid = TimeGrid.daily(30 / 365)
    exact = snapshot([Contract(CALL, 100.0, 30, 20.0), Contract(PUT, 130.0, 30, 10.0)], spot=120.0)
    assert objective_mse(m, grid, 4, 0, exact) == 0.0
    off = snapshot([Contract(CALL, 100.0, 30, 22.0)], spot=120.0)
    assert objective_mse(m, grid, 4, 0, off) == pytest.approx(4.0)
    bs = BlackScholes(0.2)
    snap = snapshot([Contract(CALL, 100.0, 30, 2.0)])
    assert objective_mse(bs, grid, 500, 3, snap) == objective_mse(bs, grid, 500, 3, snap)


def test_tape_through_simulation_gives_pathwise_derivative():
    m = BlackScholes(0.2, spot=100.0)
    grid = TimeGrid(0.25, 5)
    b = simulate(m, grid, 1000, seed=6, record_tape=True)
    p = price_european(b, [Vanilla("C", 100.0, 0.25)], 0.0).values
    g = nx.grad(b.tape, p.sum(), b.theta)
    h = 1e-6

    def price(sig):
        bb = simulate(m.with_params([sig]), grid, 1000, seed=6)
        return float(price_european(bb, [Vanilla("C", 100.0, 0.25)],
                                    0.0).values[0])

    assert g[0] == pytest.approx((price(0.2 + h) - price(0.2 - h)) / (2 * h), rel=1e-5)


def test_dump_paths(tmp_path):
    m = BlackScholes(0.2, spot=100.0)
    b = simulate(m, TimeGrid(1.0, 3), 4, seed=0)
    p = tmp_path / "paths.bin"
    dump_paths(b, p, m)
    raw = np.fromfile(p, dtype="<f8").reshape(4, 4)
    np.testing.assert_array_equal(raw, b.S)
    meta = json.loads((tmp_path / "paths.bin.json").read_text())
    assert meta["seed"] == 0 and meta["model"] == m.fingerprint() and meta["steps"] == 3
