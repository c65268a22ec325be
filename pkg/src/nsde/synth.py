"""Synthetic option snapshots from known generators.

Black-Scholes snapshots are exact closed-form prices; Heston snapshots are
priced with a fine PDE grid, which is what makes American quotes available.
``noise_bps`` perturbs every mid price by a uniform relative amount to mimic a
rough market surface.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pde
from .errors import ArgumentError
from .market import AMERICAN, CALL, EUROPEAN, PUT, Contract, MarketSnapshot, export_snapshot, load_snapshot
from .models.closed_form import bs_price
from .models.sde import Heston

logger = logging.getLogger(__name__)

DEFAULT_STRIKES = tuple(float(k) for k in range(80, 121, 5))
DEFAULT_MATURITIES = (30, 60, 91, 182)
BUNDLED_BS_DATES = (dt.date(2020, 1, 2), dt.date(2020, 1, 3), dt.date(2020, 1, 6))
BUNDLED_HESTON_DATE = dt.date(2020, 1, 2)
MIN_PRICE = 1e-4  # quotes below this are dropped, as a market would not show them


@dataclass(frozen=True)
class BsWorld:
    sigma: float = 0.2
    rate: float = 0.02
    dividend: float = 0.01
    spot: float = 100.0


def _noisy(prices: np.ndarray, noise_bps: float, rng: np.random.Generator) -> np.ndarray:
    if noise_bps < 0:
        raise ArgumentError("noise must be non-negative")
    if noise_bps == 0:
        return prices
    return prices * (1.0 + rng.uniform(-1.0, 1.0, prices.shape) * noise_bps * 1e-4)


def _quotes(date, spot, rate, dividend, rows, noise_bps, seed) -> MarketSnapshot:
    """``rows`` is a list of (style, payoff, strike, days, price)."""
    rng = np.random.default_rng(seed)
    prices = _noisy(np.array([r[4] for r in rows], dtype=np.float64), noise_bps, rng)
    out = []
    for (style, payoff, k, days, _), p in zip(rows, prices):
        if p < MIN_PRICE:
            continue
        out.append(Contract(payoff, k, int(days), float(p), style))
    dropped = len(rows) - len(out)
    if dropped:
        logger.info("%d quotes below %g dropped", dropped, MIN_PRICE)
    return MarketSnapshot(date, float(spot), float(rate), float(dividend), tuple(out))


def bs_snapshot(date: dt.date, world: BsWorld = BsWorld(), strikes: Sequence[float] = DEFAULT_STRIKES,
                maturities: Sequence[int] = DEFAULT_MATURITIES, noise_bps: float = 0.0, seed: int = 0,
                spot: float | None = None) -> MarketSnapshot:
    """European calls and puts priced in closed form."""
    s = world.spot if spot is None else spot
    rows = []
    for days in maturities:
        for k in strikes:
            for payoff in (CALL, PUT):
                p = float(bs_price(s, k, days / 365.0, world.rate, world.dividend, world.sigma, payoff))
                rows.append((EUROPEAN, payoff, float(k), days, p))
    return _quotes(date, s, world.rate, world.dividend, rows, noise_bps, seed)


def bs_days(dates: Sequence[dt.date] = BUNDLED_BS_DATES, world: BsWorld = BsWorld(), seed: int = 0,
            noise_bps: float = 0.0, **kwargs) -> list[MarketSnapshot]:
    """Consecutive snapshots with the spot following GBM between dates.

    Expiry dates are fixed at the first date, so maturities shrink from day
    to day and every contract can be followed through the chain.
    """
    rng = np.random.default_rng(seed)
    s = world.spot
    maturities = tuple(kwargs.pop("maturities", DEFAULT_MATURITIES))
    out = []
    for i, d in enumerate(dates):
        elapsed = (d - dates[0]).days
        if elapsed >= min(maturities):
            raise ArgumentError("the date range outlives the shortest maturity")
        if i:
            tau = (d - dates[i - 1]).days / 365.0
            if tau <= 0:
                raise ArgumentError("dates must increase")
            z = rng.standard_normal()
            s *= math.exp((world.rate - world.dividend - 0.5 * world.sigma**2) * tau + world.sigma * math.sqrt(tau) * z)
            s = round(s, 2)
        out.append(bs_snapshot(d, world, maturities=[m - elapsed for m in maturities], noise_bps=noise_bps,
                               seed=seed * 1000 + i, spot=s, **kwargs))
    return out


def heston_snapshot(date: dt.date, model: Heston | None = None, spot: float = 100.0, rate: float = 0.02,
                    dividend: float = 0.0, strikes: Sequence[float] = (80.0, 90.0, 100.0, 110.0, 120.0),
                    maturities: Sequence[int] = (30, 91), american: bool = True, noise_bps: float = 0.0,
                    seed: int = 0, config: pde.PdeConfig | None = None) -> MarketSnapshot:
    """European calls/puts and (optionally) American puts from a fine-grid PDE solve."""
    model = (model or Heston(y0=0.04, alpha=1.5, m=0.04, k=0.3, rho=-0.5)).with_market(rate, dividend, spot)
    cfg = config or pde.PdeConfig(n_s=240, n_y=40, s_max=3.0 * spot, y_range=(0.0, 0.5))
    contracts = []
    for days in maturities:
        for k in strikes:
            contracts.append(Contract(CALL, k, days, 0.0, EUROPEAN))
            contracts.append(Contract(PUT, k, days, 0.0, EUROPEAN))
            if american:
                contracts.append(Contract(PUT, k, days, 0.0, AMERICAN))
    prices = pde.price(model, contracts, spot, rate, cfg).price_values()
    rows = [(c.style, c.payoff, c.strike, c.maturity_days, float(p)) for c, p in zip(contracts, prices)]
    return _quotes(date, spot, rate, dividend, rows, noise_bps, seed)


# ---------------------------------------------------------------------------
# Bundled data


def bundled_paths() -> dict[str, list[Path]]:
    """Files shipped with the package: ``{"bs": [...], "heston": [...]}``."""
    root = Path(str(resources.files("nsde") / "data"))
    return {"bs": sorted(root.glob("synth_bs_*.csv")), "heston": sorted(root.glob("synth_heston_*.csv"))}


def load_bundled(name: str) -> list[MarketSnapshot]:
    paths = bundled_paths().get(name)
    if not paths:
        raise ArgumentError(f"no bundled data set {name!r}")
    return [load_snapshot(p) for p in paths]


def write_bundle(out_dir: str | Path, seed: int = 0) -> list[Path]:
    """Regenerate the bundled snapshots into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for snap in bs_days(seed=seed):
        p = out / f"synth_bs_{snap.date.isoformat()}.csv"
        export_snapshot(snap, p)
        written.append(p)
    snap = heston_snapshot(BUNDLED_HESTON_DATE, seed=seed)
    p = out / f"synth_heston_{snap.date.isoformat()}.csv"
    export_snapshot(snap, p)
    written.append(p)
    return written
