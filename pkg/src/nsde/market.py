"""Contracts, market snapshots, CSV ingestion/export, pairing, splits and dividends."""

from __future__ import annotations

import csv
import datetime as dt
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import net as nx
from .errors import ArgumentError, EmptyPairingError, EmptySnapshotError, ParseError

logger = logging.getLogger(__name__)

DAYS_PER_YEAR = 365.0
INDEX_DIVIDEND_SP100 = 0.0191

CALL, PUT = "C", "P"
EUROPEAN, AMERICAN, BERMUDAN = "E", "A", "B"


@dataclass(frozen=True)
class Contract:
    """One option quote.  Maturity is kept in calendar days; ``maturity`` is the year fraction."""

    payoff: str
    strike: float
    maturity_days: int
    market_price: float
    style: str = EUROPEAN
    exercise_interval_days: int | None = None
    bid: float | None = None
    ask: float | None = None
    id: str = ""

    def __post_init__(self):
        if self.payoff not in (CALL, PUT):
            raise ArgumentError(f"payoff must be 'C' or 'P', got {self.payoff!r}")
        if self.style not in (EUROPEAN, AMERICAN, BERMUDAN):
            raise ArgumentError(f"style must be E, A or B, got {self.style!r}")
        if not self.strike > 0:
            raise ArgumentError(f"strike must be positive, got {self.strike}")
        if not self.maturity_days > 0:
            raise ArgumentError(f"maturity must be positive, got {self.maturity_days} days")
        if not self.market_price >= 0:
            raise ArgumentError(f"market price must be non-negative, got {self.market_price}")
        if self.style == BERMUDAN and not (self.exercise_interval_days and self.exercise_interval_days > 0):
            raise ArgumentError("Bermudan contracts need a positive exercise interval")
        if not self.id:
            object.__setattr__(self, "id", f"{self.style}{self.payoff}-K{self.strike:g}-T{self.maturity_days}")

    @property
    def maturity(self) -> float:
        return self.maturity_days / DAYS_PER_YEAR

    @property
    def early_exercise(self) -> bool:
        return self.style != EUROPEAN

    def payoff_value(self, s):
        """Intrinsic value on spot(s) ``s``; works on tape variables."""
        if self.payoff == CALL:
            return nx.maximum(s - self.strike, 0.0)
        return nx.maximum(self.strike - s, 0.0)

    def key(self) -> tuple:
        return (self.payoff, self.strike, self.maturity_days, self.style)


@dataclass(frozen=True)
class MarketSnapshot:
    date: dt.date
    spot: float
    rate: float
    dividend: float
    contracts: tuple[Contract, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "contracts", tuple(self.contracts))

    def __len__(self) -> int:
        return len(self.contracts)

    def with_contracts(self, contracts: Iterable[Contract]) -> "MarketSnapshot":
        return replace(self, contracts=tuple(contracts))

    def calls(self) -> "MarketSnapshot":
        return self.with_contracts(c for c in self.contracts if c.payoff == CALL)

    def puts(self) -> "MarketSnapshot":
        return self.with_contracts(c for c in self.contracts if c.payoff == PUT)

    def of_style(self, *styles: str) -> "MarketSnapshot":
        return self.with_contracts(c for c in self.contracts if c.style in styles)


@dataclass(frozen=True)
class ContractPair:
    call: Contract
    put: Contract

    def __post_init__(self):
        if self.call.payoff != CALL or self.put.payoff != PUT:
            raise ArgumentError("a pair is one call and one put")
        if (self.call.strike, self.call.maturity_days) != (self.put.strike, self.put.maturity_days):
            raise ArgumentError("pair legs must share strike and maturity")


# ---------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class CsvSchema:
    columns: tuple[str, ...] = (
        "date", "style", "payoff", "strike", "maturity_days", "bid", "ask", "mid", "spot", "rate", "dividend",
    )


DEFAULT_SCHEMA = CsvSchema()


def _num(text: str, row: int, col: str, *, optional: bool = False) -> float | None:
    text = text.strip()
    if text == "":
        if optional:
            return None
        raise ParseError("missing value", row, col)
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}", row, col) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {text!r}", row, col)
    return v


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def load_snapshot(path: str | Path, schema: CsvSchema = DEFAULT_SCHEMA) -> MarketSnapshot:
    """Read one snapshot.  Rows with non-positive price, strike or maturity are rejected and logged.

    The market price is the bid/ask mid when both are quoted, otherwise the
    ``mid`` column.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise EmptySnapshotError(f"{path}: empty file")
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(h.strip() for h in header) != schema.columns:
        raise ParseError(f"header {header} does not match {list(schema.columns)}", 1)
    meta = None
    contracts: dict[tuple, Contract] = {}
    rejected = 0
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(schema.columns):
            raise ParseError(f"expected {len(schema.columns)} fields, got {len(row)}", rowno)
        rec = dict(zip(schema.columns, row))
        try:
            date = dt.date.fromisoformat(rec["date"].strip())
        except ValueError:
            raise ParseError(f"bad date {rec['date']!r}", rowno, "date") from None
        style = rec["style"].strip()
        if style not in (EUROPEAN, AMERICAN):
            raise ParseError(f"style must be E or A, got {style!r}", rowno, "style")
        payoff = rec["payoff"].strip()
        if payoff not in (CALL, PUT):
            raise ParseError(f"payoff must be C or P, got {payoff!r}", rowno, "payoff")
        strike = _num(rec["strike"], rowno, "strike")
        days_f = _num(rec["maturity_days"], rowno, "maturity_days")
        if days_f != int(days_f):
            raise ParseError("maturity_days must be an integer", rowno, "maturity_days")
        bid = _num(rec["bid"], rowno, "bid", optional=True)
        ask = _num(rec["ask"], rowno, "ask", optional=True)
        mid = _num(rec["mid"], rowno, "mid", optional=True)
        row_meta = (date, _num(rec["spot"], rowno, "spot"), _num(rec["rate"], rowno, "rate"),
                    _num(rec["dividend"], rowno, "dividend"))
        if meta is None:
            meta = row_meta
        elif row_meta != meta:
            raise ParseError("date/spot/rate/dividend differ from the first row", rowno)
        if bid is not None and ask is not None:
            price = 0.5 * (bid + ask)
        elif mid is not None:
            price = mid
        else:
            raise ParseError("no price: need bid and ask, or mid", rowno, "mid")
        bad = [name for name, v in (("mid", price), ("strike", strike), ("maturity_days", days_f)) if not v > 0]
        if bad:
            logger.warning("%s: row %d rejected, non-positive %s", path, rowno, ", ".join(bad))
            rejected += 1
            continue
        c = Contract(payoff=payoff, strike=strike, maturity_days=int(days_f), market_price=price, style=style,
                     bid=bid, ask=ask)
        if c.key() in contracts:
            logger.warning("%s: row %d restates %s; keeping the last row", path, rowno, c.id)
            del contracts[c.key()]
        contracts[c.key()] = c
    if meta is None:
        raise EmptySnapshotError(f"{path}: no data rows")
    date, spot, rate, div = meta
    if not spot > 0:
        raise ParseError("spot must be positive", 2, "spot")
    snap = MarketSnapshot(date, spot, rate, div, tuple(contracts.values()))
    if rejected and not snap.contracts:
        raise EmptySnapshotError(f"{path}: every row was rejected")
    return snap


def export_snapshot(snapshot: MarketSnapshot, path: str | Path | None = None,
                    schema: CsvSchema = DEFAULT_SCHEMA) -> str:
    """Write ``snapshot`` in the ingestion format; returns the CSV text.

    ``mid`` is always the contract's market price.  Bermudan contracts have no
    CSV representation.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(schema.columns)
    for c in snapshot.contracts:
        if c.style == BERMUDAN:
            raise ArgumentError(f"{c.id}: Bermudan contracts cannot be exported")
        w.writerow([snapshot.date.isoformat(), c.style, c.payoff, _fmt(c.strike), str(c.maturity_days),
                    _fmt(c.bid), _fmt(c.ask), _fmt(c.market_price), _fmt(snapshot.spot), _fmt(snapshot.rate),
                    _fmt(snapshot.dividend)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8", newline="")
    return text


# ---------------------------------------------------------------------------
# Pairing, splitting and filtering


def pair_contracts(snapshot: MarketSnapshot) -> list[ContractPair]:
    """Call/put pairs at equal strike, maturity and style, sorted by (style, maturity, strike)."""
    calls = {(c.style, c.maturity_days, c.strike): c for c in snapshot.contracts if c.payoff == CALL}
    puts = {(c.style, c.maturity_days, c.strike): c for c in snapshot.contracts if c.payoff == PUT}
    keys = sorted(calls.keys() & puts.keys())
    return [ContractPair(calls[k], puts[k]) for k in keys]


def split_pairs(snapshot: MarketSnapshot, train_fraction: float, seed: int) -> tuple[MarketSnapshot, MarketSnapshot]:
    """Random train/test split that keeps both legs of every pair together."""
    if not 0.0 < train_fraction < 1.0:
        raise ArgumentError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    pairs = pair_contracts(snapshot)
    if not pairs:
        raise EmptyPairingError("no call/put pairs in the snapshot")
    unpaired = len(snapshot.contracts) - 2 * len(pairs)
    if unpaired:
        logger.warning("%d unpaired contracts left out of the split", unpaired)
    n_train = int(math.floor(train_fraction * len(pairs) + 0.5))
    order = np.random.default_rng(seed).permutation(len(pairs))
    train_idx = set(order[:n_train].tolist())
    if n_train == len(pairs):
        logger.warning("train fraction %.3f assigns all %d pairs to train; test set is empty", train_fraction,
                       len(pairs))
    train, test = [], []
    for k, p in enumerate(pairs):
        (train if k in train_idx else test).extend((p.call, p.put))
    return snapshot.with_contracts(train), snapshot.with_contracts(test)


AT_OR_BELOW, ABOVE = "at_or_below", "above"


def filter_strikes(snapshot: MarketSnapshot, max_strike: float, side: str = AT_OR_BELOW) -> MarketSnapshot:
    if side == AT_OR_BELOW:
        return snapshot.with_contracts(c for c in snapshot.contracts if c.strike <= max_strike)
    if side == ABOVE:
        return snapshot.with_contracts(c for c in snapshot.contracts if c.strike > max_strike)
    raise ArgumentError(f"side must be {AT_OR_BELOW!r} or {ABOVE!r}")


def filter_atm_window(snapshot: MarketSnapshot, k_lo: float, k_hi: float, t_lo: float, t_hi: float) -> MarketSnapshot:
    """Keep contracts with strike in [k_lo, k_hi] and maturity (years) in [t_lo, t_hi]."""
    if not k_lo < k_hi or not t_lo < t_hi:
        raise ArgumentError("window bounds are inverted")
    return snapshot.with_contracts(
        c for c in snapshot.contracts if k_lo <= c.strike <= k_hi and t_lo <= c.maturity <= t_hi
    )


def estimate_dividend_rate(dividends: Sequence[tuple[dt.date, float]], close: float, as_of: dt.date,
                           override: float | None = None) -> float:
    """Trailing one-year dividend sum over the closing price.

    ``override`` short-circuits the estimate (index options use a constant yield,
    e.g. :data:`INDEX_DIVIDEND_SP100`).
    """
    if override is not None:
        return float(override)
    if not close > 0:
        raise ArgumentError(f"close must be positive, got {close}")
    try:
        start = as_of.replace(year=as_of.year - 1)
    except ValueError:  # 29 February
        start = as_of.replace(year=as_of.year - 1, day=28)
    total = sum(amount for d, amount in dividends if start < d <= as_of)
    return total / close
