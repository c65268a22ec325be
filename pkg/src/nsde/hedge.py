"""Model deltas and delta-hedging error metrics."""

from __future__ import annotations

import csv
import datetime as dt
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import pde
from .errors import ArgumentError
from .market import CALL, Contract, ContractPair, MarketSnapshot
from .mc import TimeGrid, price_streaming
from .models.closed_form import bs_delta, bs_implied_vol
from .models.sde import SdeModel

logger = logging.getLogger(__name__)

MC_COMMON = "mc"
PDE_SLOPE = "pde"
BS_CLOSED = "bs"
METHODS = (MC_COMMON, PDE_SLOPE, BS_CLOSED)
DEFAULT_BUMP = 0.005  # fraction of spot


@dataclass(frozen=True)
class DeltaRequest:
    contract: Contract
    h: float
    method: str = MC_COMMON

    def check(self, s0: float) -> None:
        if self.method not in METHODS:
            raise ArgumentError(f"unknown delta method {self.method!r}; choose one of {METHODS}")
        if not self.h > 0:
            raise ArgumentError(f"bump must be positive, got {self.h}")
        if s0 - self.h <= 0:
            raise ArgumentError(f"s0 - h = {s0 - self.h} must be positive")
        if not self.h < s0 / 10:
            raise ArgumentError(f"bump {self.h} must be below s0/10 = {s0 / 10}")


def mc_delta(model: SdeModel, contract, s0: float, h: float, seed: int, L: int, r: float,
             common: bool = True, steps_per_day: int = 1) -> float:
    """Central difference of two simulations; ``common`` reuses the same draws for both bumps."""
    grid = TimeGrid.for_contracts([contract], steps_per_day)
    up = price_streaming(model, grid, [contract], L, seed, r, s0=s0 + h).price[0]
    dn = price_streaming(model, grid, [contract], L, seed if common else seed + 1, r, s0=s0 - h).price[0]
    return (up - dn) / (2 * h)


def delta(model: SdeModel | None, contract: Contract, s0: float, h: float | None = None, method: str = MC_COMMON,
          seed: int = 0, *, r: float = 0.0, d: float = 0.0, pair: ContractPair | None = None, L: int = 100_000,
          pde_config: pde.PdeConfig | None = None, sigma: float | None = None) -> float:
    """Model delta of ``contract`` at spot ``s0``.

    ``bs`` uses the implied vol of the pair's call (or of the contract itself
    when it is a call); pass ``sigma`` to skip the implied-vol step.
    """
    h = DEFAULT_BUMP * s0 if h is None else h
    DeltaRequest(contract, h, method).check(s0)
    if method == BS_CLOSED:
        if sigma is None:
            if pair is not None:
                ref = pair.call
            elif contract.payoff == CALL:
                ref = contract
            else:
                raise ArgumentError("closed-form hedging of a put needs its call/put pair")
            sigma = bs_implied_vol(ref.market_price, s0, ref.strike, ref.maturity, r, d, CALL)
        return float(bs_delta(s0, contract.strike, contract.maturity, r, d, sigma, contract.payoff))
    if model is None:
        raise ArgumentError(f"method {method!r} needs a model")
    m = model.with_market(r, d)
    if method == MC_COMMON:
        return float(mc_delta(m, contract, s0, h, seed, L, r))
    sol = pde.price(m, [contract], s0, r, pde_config)
    return float(sol.slope(nx_value(m.initial_y()))[0])


def nx_value(x) -> float:
    from .net import value

    return float(value(x))


# ---------------------------------------------------------------------------
# Hedging errors


@dataclass(frozen=True)
class HedgeRecord:
    t: dt.date
    p_t: float
    p_next: float
    s_t: float
    s_next: float
    delta: float
    contract_id: str = ""

    @property
    def dp(self) -> float:
        return self.p_next - self.p_t

    @property
    def ds(self) -> float:
        return self.s_next - self.s_t

    @property
    def error(self) -> float:
        return self.dp - self.delta * self.ds


@dataclass(frozen=True)
class HedgeErrors:
    mae: float
    mse: float
    rel_mae: float  # percent
    n: int
    n_rel_skipped: int = 0


def hedge_errors(records: Sequence[HedgeRecord]) -> HedgeErrors:
    """MAE, MSE and relative MAE (percent of P_t) of ``dP - delta * dS``."""
    if not records:
        raise ArgumentError("hedge_errors needs at least one record")
    err = np.array([r.error for r in records])
    p = np.array([r.p_t for r in records])
    ok = p > 0
    skipped = int((~ok).sum())
    if skipped:
        logger.warning("%d record(s) with P_t <= 0 left out of the relative MAE", skipped)
    rel = float(np.mean(np.abs(err[ok]) / p[ok]) * 100.0) if ok.any() else math.nan
    return HedgeErrors(float(np.mean(np.abs(err))), float(np.mean(err * err)), rel, len(records), skipped)


REPORT_COLUMNS = ("date", "contract_id", "delta", "dP", "dS", "abs_err")


def hedge_report(records: Sequence[HedgeRecord], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in records:
        w.writerow([r.t.isoformat(), r.contract_id, repr(r.delta), repr(r.dp), repr(r.ds), repr(abs(r.error))])
    if path is not None:
        Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")
    return buf.getvalue()


def backtest(snapshots: Sequence[MarketSnapshot], delta_fn: Callable[[MarketSnapshot, Contract], float]
             ) -> list[HedgeRecord]:
    """Records for every contract quoted on two consecutive snapshots.

    A contract on day t+1 matches when it has the same payoff, strike and
    expiry date (its maturity is one calendar gap shorter).
    """
    records = []
    for today, nxt in zip(snapshots, snapshots[1:]):
        gap = (nxt.date - today.date).days
        if gap <= 0:
            raise ArgumentError("snapshots must be in increasing date order")
        later = {(c.payoff, c.strike, c.maturity_days + gap, c.style): c for c in nxt.contracts}
        for c in today.contracts:
            m = later.get(c.key())
            if m is None:
                continue
            records.append(HedgeRecord(today.date, c.market_price, m.market_price, today.spot, nxt.spot,
                                       float(delta_fn(today, c)), c.id))
    return records


@dataclass
class GbmWorld:
    """Self-consistent world: GBM spot, Black-Scholes prices, daily steps of 1/365."""

    s0: float = 100.0
    sigma: float = 0.2
    r: float = 0.0
    d: float = 0.0
    strike: float = 100.0
    maturity_days: int = 548
    n_steps: int = 252
    payoff: str = CALL

    def spots(self, seed: int) -> np.ndarray:
        dt_ = 1.0 / 365.0
        z = np.random.default_rng(seed).standard_normal(self.n_steps)
        incr = (self.r - self.d - 0.5 * self.sigma**2) * dt_ + self.sigma * math.sqrt(dt_) * z
        return self.s0 * np.exp(np.concatenate([[0.0], np.cumsum(incr)]))

    def records(self, seed: int, hedge: bool = True) -> list[HedgeRecord]:
        from .models.closed_form import bs_price

        s = self.spots(seed)
        start = dt.date(2000, 1, 3)
        tau = (self.maturity_days - np.arange(self.n_steps + 1)) / 365.0
        p = bs_price(s, self.strike, tau, self.r, self.d, self.sigma, self.payoff)
        out = []
        for n in range(self.n_steps):
            dl = bs_delta(s[n], self.strike, tau[n], self.r, self.d, self.sigma, self.payoff) if hedge else 0.0
            out.append(HedgeRecord(start + dt.timedelta(days=n), float(p[n]), float(p[n + 1]), float(s[n]),
                                   float(s[n + 1]), float(dl), f"{self.payoff}-K{self.strike:g}"))
        return out
