from __future__ import annotations

import datetime as dt

import numpy as np
import pytest

from nsde import pde, synth
from nsde.errors import ArgumentError
from nsde.market import AMERICAN, EUROPEAN, export_snapshot
from nsde.models.closed_form import bs_price

from oracles import bs_call_put


def test_bundled_files_load():
    paths = synth.bundled_paths()
    assert len(paths["bs"]) == 3 and len(paths["heston"]) == 1
    days = synth.load_bundled("bs")
    assert [d.date for d in days] == list(synth.BUNDLED_BS_DATES)
    heston = synth.load_bundled("heston")[0]
    assert {c.style for c in heston.contracts} == {EUROPEAN, AMERICAN}
    with pytest.raises(ArgumentError):
        synth.load_bundled("nothing")


def test_bundled_bs_prices_match_oracle():
    w = synth.BsWorld()
    for snap in synth.load_bundled("bs"):
        for c in snap.contracts:
            ref = bs_call_put(snap.spot, c.strike, c.maturity, w.rate, w.dividend, w.sigma, c.payoff)
            assert c.market_price == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_expiries_fixed_across_days():
    days = synth.bs_days()
    expiries = [{(c.payoff, c.strike, d.date + dt.timedelta(days=c.maturity_days)) for c in d.contracts} for d in days]
    # a quote may drop below the minimum price as time passes, never appear from nowhere
    assert expiries[1] <= expiries[0] | expiries[1] and len(expiries[0] & expiries[1]) > 60
    assert days[0].spot == 100.0 and days[1].spot != days[0].spot


def test_min_price_filter_and_noise():
    snap = synth.bs_snapshot(dt.date(2020, 1, 2), strikes=(40.0, 100.0), maturities=(30,))
    assert all(c.market_price >= synth.MIN_PRICE for c in snap.contracts)
    assert len(snap.contracts) == 3  # the 30-day put struck at 40 is worthless
    clean = synth.bs_snapshot(dt.date(2020, 1, 2))
    noisy = synth.bs_snapshot(dt.date(2020, 1, 2), noise_bps=50, seed=4)
    rel = np.array([n.market_price / c.market_price - 1 for n, c in zip(noisy.contracts, clean.contracts)])
    assert np.abs(rel).max() <= 50e-4 and np.abs(rel).max() > 10e-4
    with pytest.raises(ArgumentError):
        synth.bs_snapshot(dt.date(2020, 1, 2), noise_bps=-1)


def test_generation_is_deterministic(tmp_path):
    bundled = {p.name: p for p in synth.bundled_paths()["bs"]}
    for seed in (0, 0):
        for snap in synth.bs_days(seed=seed):
            p = tmp_path / f"synth_bs_{snap.date.isoformat()}.csv"
            export_snapshot(snap, p)
            assert p.read_bytes() == bundled[p.name].read_bytes()
    small = pde.PdeConfig(n_s=60, n_y=8, s_max=300.0, y_range=(0.0, 0.5))
    a = synth.heston_snapshot(dt.date(2020, 1, 2), strikes=(100.0,), maturities=(30,), config=small)
    b = synth.heston_snapshot(dt.date(2020, 1, 2), strikes=(100.0,), maturities=(30,), config=small)
    assert a == b


def test_heston_snapshot_american_premium():
    snap = synth.load_bundled("heston")[0]
    eu = {c.strike: c.market_price for c in snap.contracts if c.style == EUROPEAN and c.payoff == "P"
          and c.maturity_days == 91}
    am = {c.strike: c.market_price for c in snap.contracts if c.style == AMERICAN and c.maturity_days == 91}
    assert am and all(am[k] >= eu[k] for k in am)


def test_bad_date_ranges():
    with pytest.raises(ArgumentError):
        synth.bs_days([dt.date(2020, 1, 3), dt.date(2020, 1, 2)])
    with pytest.raises(ArgumentError):
        synth.bs_days([dt.date(2020, 1, 2), dt.date(2020, 3, 2)])


def test_closed_form_price_consistency():
    assert float(bs_price(100.0, 100.0, 1.0, 0.0, 0.0, 0.2)) == pytest.approx(7.965567455405804, abs=1e-9)
