"""Experiment harness: train/test protocols, per-contract reports and aggregates.

Six protocols are supported.  ``intraday`` splits one day's pairs 80/20;
``next-day`` trains on one day and tests on the next; ``cross-payoff`` trains
on calls and tests on puts; ``strike-extrapolation`` trains below a strike
threshold and tests above it; ``recalibration`` walks a chain of days with a
warm-started model next to a model frozen after the first day;
``euro-to-american`` trains on European quotes and tests on American ones.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pde
from .errors import ExperimentError
from .market import AMERICAN, CALL, EUROPEAN, PUT, MarketSnapshot, filter_strikes, split_pairs, ABOVE, AT_OR_BELOW
from .mc import TimeGrid, price_streaming
from .models.dupire import NnlvConfig, nnlv_fit
from .models.sde import (
    NNLV, SDENN, BlackScholes, Heston, SDENNDrift, SdeModel, TwoDNN, TwoDNNHeston,
)
from .sgd import SgdConfig, calibrate

logger = logging.getLogger(__name__)

INTRADAY, NEXT_DAY, CROSS_PAYOFF = "intraday", "next-day", "cross-payoff"
STRIKE_EXTRAPOLATION, RECALIBRATION, EURO_TO_AMERICAN = "strike-extrapolation", "recalibration", "euro-to-american"
KINDS = (INTRADAY, NEXT_DAY, CROSS_PAYOFF, STRIKE_EXTRAPOLATION, RECALIBRATION, EURO_TO_AMERICAN)
MC_SGD, PDE_ENGINE = "mc-sgd", "pde"
ENGINES = (MC_SGD, PDE_ENGINE)
REPORT_FORMAT = "nsde.report/1"

_MODEL_CLASSES = {
    "bs": BlackScholes, "heston": Heston, "2dnn": TwoDNN, "2dnn_heston": TwoDNNHeston, "sdenn": SDENN,
    "sdenn_drift": SDENNDrift, "nnlv": NNLV,
}


@dataclass
class ModelSpec:
    kind: str = "bs"
    hyper: dict = field(default_factory=dict)
    seed: int = 0

    def build(self, snapshot: MarketSnapshot) -> SdeModel:
        cls = _MODEL_CLASSES.get(self.kind)
        if cls is None:
            raise ExperimentError(f"model kind {self.kind!r} cannot be trained here; choose from {sorted(_MODEL_CLASSES)}")
        hyper = dict(self.hyper)
        if "hidden" in hyper:
            hyper["hidden"] = tuple(hyper["hidden"])
        if cls in (TwoDNN, TwoDNNHeston, SDENN, SDENNDrift, NNLV):
            hyper.setdefault("seed", self.seed)
        return cls(rate=snapshot.rate, dividend=snapshot.dividend, spot=snapshot.spot, **hyper)


@dataclass
class Experiment:
    kind: str
    model: ModelSpec = field(default_factory=ModelSpec)
    engine: str = MC_SGD
    seed: int = 0
    train_fraction: float = 0.8
    threshold: float | None = None  # strike-extrapolation; default: first day's spot
    window: int | None = None  # recalibration: number of days (default: all)
    sgd: SgdConfig = field(default_factory=lambda: SgdConfig(L=2048, learning_rate=5e-3, max_iters=200))
    pde_cal: pde.PdeCalConfig = field(default_factory=lambda: pde.PdeCalConfig(learning_rate=5e-3, max_iters=100))
    pde_grid: pde.PdeConfig | None = None  # None: chosen from the model dimension
    eval_L: int = 100_000
    nnlv: NnlvConfig = field(default_factory=lambda: NnlvConfig(epochs=500, optimizer="lbfgs"))

    def grid_for(self, model: SdeModel) -> pde.PdeConfig:
        """Explicit grid, or a desk-sized default (coarser for two-dimensional models)."""
        if self.pde_grid is not None:
            return self.pde_grid
        if model.dim == 1:
            return pde.PdeConfig(n_s=160, s_max_factor=3.0)
        y_range = (0.0, 0.25) if hasattr(model, "values") else None
        return pde.PdeConfig(n_s=60, n_y=16, s_max_factor=2.0, y_range=y_range)

    def cal_for(self, model: SdeModel) -> pde.PdeCalConfig:
        return replace(self.pde_cal, pde=self.grid_for(model))

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ExperimentError(f"unknown experiment {self.kind!r}; choose one of {KINDS}")
        if self.engine not in ENGINES:
            raise ExperimentError(f"unknown engine {self.engine!r}; choose one of {ENGINES}")
        if self.kind == EURO_TO_AMERICAN and self.engine != PDE_ENGINE:
            raise ExperimentError("American contracts need the pde engine")


@dataclass
class ContractRow:
    variant: str
    date: str
    split: str
    id: str
    payoff: str
    style: str
    market: float
    model: float
    noise: float  # MC stderr or PDE discretization estimate
    abs_err: float
    sq_err: float
    rel_err: float


@dataclass
class AggRow:
    group: dict
    n: int
    mse: float
    mae: float
    rel_mae: float  # percent


@dataclass
class EvalReport:
    experiment: str
    engine: str
    model: str
    seed: int
    rows: list[ContractRow]
    aggregates: list[AggRow]
    daily: list[AggRow]
    noise_floor: dict  # variant/split -> mean squared noise
    param_hashes: dict  # variant -> one fingerprint per day

    def to_json(self) -> dict:
        return {"format": REPORT_FORMAT, **asdict(self)}


# ---------------------------------------------------------------------------
# Aggregation


def aggregate(rows: Sequence[ContractRow] | EvalReport, group_by: Sequence[str] = ("payoff", "split"),
              overall: bool = True) -> list[AggRow]:
    """Mean MSE, MAE and relMAE per group, sorted by group key, plus an overall row (group ``{}``).

    Rows whose market price is not positive do not enter relMAE.
    """
    if isinstance(rows, EvalReport):
        rows = rows.rows
    groups: dict[tuple, list[ContractRow]] = {}
    for r in rows:
        groups.setdefault(tuple(getattr(r, g) for g in group_by), []).append(r)
    out = [_agg(dict(zip(group_by, key)), groups[key]) for key in sorted(groups)]
    if overall and rows:
        out.append(_agg({}, list(rows)))
    if not rows:
        logger.warning("aggregate called with no rows")
    return out


def _agg(group: dict, rows: Sequence[ContractRow]) -> AggRow:
    ae = np.array([r.abs_err for r in rows])
    rel = np.array([r.rel_err for r in rows if r.market > 0])
    return AggRow(group, len(rows), float(np.mean(ae * ae)), float(np.mean(ae)),
                  float(np.mean(rel) * 100.0) if rel.size else math.nan)


AGG_COLUMNS = ("group", "n", "mse", "mae", "rel_mae")


def aggregates_csv(aggs: Sequence[AggRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGG_COLUMNS)
    for a in aggs:
        label = ";".join(f"{k}={v}" for k, v in a.group.items()) or "overall"
        w.writerow([label, a.n, repr(a.mse), repr(a.mae), repr(a.rel_mae)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Engines


def _check_styles(engine: str, snapshot: MarketSnapshot) -> None:
    if engine != PDE_ENGINE and any(c.style != EUROPEAN for c in snapshot.contracts):
        raise ExperimentError("early-exercise contracts need the pde engine")


def train(model: SdeModel, snapshot: MarketSnapshot, exp: Experiment) -> SdeModel:
    """Calibrate ``model`` to ``snapshot`` with the experiment's engine (NNLV fits its call surface)."""
    if not snapshot.contracts:
        raise ExperimentError("empty training set")
    _check_styles(exp.engine, snapshot)
    if isinstance(model, NNLV):
        return _train_nnlv(model, snapshot, exp)
    if exp.engine == MC_SGD:
        return calibrate(model, None, exp.sgd, snapshot).model
    cal = exp.cal_for(model)
    return pde.calibrate_pde(model, snapshot, cal.loss, None, cal).model


def _train_nnlv(model: NNLV, snapshot: MarketSnapshot, exp: Experiment) -> SdeModel:
    """Fit the call surface; European puts enter as calls through put-call parity."""
    targets = []
    for c in snapshot.contracts:
        if c.style != EUROPEAN:
            continue
        t = c.maturity
        price = c.market_price
        if c.payoff == PUT:
            price += snapshot.spot * math.exp(-snapshot.dividend * t) - c.strike * math.exp(-snapshot.rate * t)
        targets.append((c.strike, t, price))
    cfg = NnlvConfig(**{**asdict(exp.nnlv), "hidden": model.hidden, "t_scale": model.t_scale,
                        "k_center": model.k_center, "k_gain": model.k_gain, "t_center": model.t_center})
    fit = nnlv_fit(targets, model.spot, cfg, init=model.params)
    return model.with_params(fit.params)


def evaluate(model: SdeModel, snapshot: MarketSnapshot, exp: Experiment) -> tuple[np.ndarray, np.ndarray]:
    """Model prices and their noise estimate on the snapshot's contracts."""
    contracts = list(snapshot.contracts)
    if not contracts:
        return np.zeros(0), np.zeros(0)
    _check_styles(exp.engine, snapshot)
    m = model.with_market(snapshot.rate, snapshot.dividend)
    if exp.engine == MC_SGD:
        grid = TimeGrid.for_contracts(contracts)
        res = price_streaming(m, grid, contracts, exp.eval_L, exp.seed + 7919, snapshot.rate, s0=snapshot.spot)
        return res.price, res.stderr
    return pde.discretization_estimate(m, contracts, snapshot.spot, snapshot.rate, exp.grid_for(m))


def _rows(variant: str, split: str, snapshot: MarketSnapshot, prices, noise) -> list[ContractRow]:
    out = []
    for c, p, e in zip(snapshot.contracts, prices, noise):
        err = float(p) - c.market_price
        rel = abs(err) / c.market_price if c.market_price > 0 else math.nan
        out.append(ContractRow(variant, snapshot.date.isoformat(), split, c.id, c.payoff, c.style, c.market_price,
                               float(p), float(e), abs(err), err * err, rel))
    return out


# ---------------------------------------------------------------------------
# Protocols


def _need(snapshots: Sequence[MarketSnapshot], n: int, kind: str) -> None:
    if len(snapshots) < n:
        raise ExperimentError(f"{kind} needs at least {n} snapshot(s), got {len(snapshots)}")


def _nonempty(snap: MarketSnapshot, what: str) -> MarketSnapshot:
    if not snap.contracts:
        raise ExperimentError(f"no {what} contracts in the data")
    return snap


def _train_test(exp: Experiment, snapshots: Sequence[MarketSnapshot]) -> list[tuple[str, MarketSnapshot, MarketSnapshot]]:
    """(label, train, test) for the single-model protocols."""
    day0 = snapshots[0]
    if exp.kind == INTRADAY:
        train_s, test_s = split_pairs(day0.of_style(EUROPEAN), exp.train_fraction, exp.seed)
        return [("model", train_s, _nonempty(test_s, "test"))]
    if exp.kind == NEXT_DAY:
        _need(snapshots, 2, exp.kind)
        return [("model", day0.of_style(EUROPEAN), _nonempty(snapshots[1].of_style(EUROPEAN), "next-day"))]
    if exp.kind == CROSS_PAYOFF:
        euro = day0.of_style(EUROPEAN)
        return [("model", _nonempty(euro.calls(), "call"), _nonempty(euro.puts(), "put"))]
    if exp.kind == STRIKE_EXTRAPOLATION:
        k = day0.spot if exp.threshold is None else exp.threshold
        euro = day0.of_style(EUROPEAN)
        return [("model", _nonempty(filter_strikes(euro, k, AT_OR_BELOW), f"strike <= {k:g}"),
                 _nonempty(filter_strikes(euro, k, ABOVE), f"strike > {k:g}"))]
    if exp.kind == EURO_TO_AMERICAN:
        return [("model", _nonempty(day0.of_style(EUROPEAN), "European"), _nonempty(day0.of_style(AMERICAN), "American"))]
    raise ExperimentError(f"{exp.kind} is not a single-model protocol")


def run(exp: Experiment, snapshots: Sequence[MarketSnapshot]) -> EvalReport:
    """Train on the protocol's train slice(s) and evaluate on the test slice(s)."""
    exp.validate()
    _need(snapshots, 1, exp.kind)
    snapshots = sorted(snapshots, key=lambda s: s.date)
    rows: list[ContractRow] = []
    hashes: dict[str, list[str]] = {}
    if exp.kind == RECALIBRATION:
        _recalibration(exp, snapshots, rows, hashes)
    else:
        for label, train_s, test_s in _train_test(exp, snapshots):
            model = train(exp.model.build(train_s), train_s, exp)
            hashes[label] = [model.fingerprint()]
            for split, snap in (("train", train_s), ("test", test_s)):
                p, e = evaluate(model, snap, exp)
                rows.extend(_rows(label, split, snap, p, e))
    noise = {}
    for r in rows:
        noise.setdefault(f"{r.variant}/{r.split}", []).append(r.noise * r.noise)
    return EvalReport(exp.kind, exp.engine, exp.model.kind, exp.seed, rows,
                      aggregate(rows, ("variant", "payoff", "split")), aggregate(rows, ("variant", "date", "split"),
                                                                                 overall=False),
                      {k: float(np.mean(v)) for k, v in sorted(noise.items())}, hashes)


def _recalibration(exp: Experiment, snapshots, rows, hashes) -> None:
    """Warm-started chain against a model frozen after day 0.

    On day t the recalibrated model starts from day t-1's parameters and
    trains on day t's train split; both models are tested on day t's test split.
    """
    days = snapshots if exp.window is None else snapshots[: exp.window]
    _need(days, 2, exp.kind)
    recal = frozen = None
    hashes["recalibrated"], hashes["frozen"] = [], []
    for t, day in enumerate(days):
        train_s, test_s = split_pairs(day.of_style(EUROPEAN), exp.train_fraction, exp.seed + t)
        _nonempty(test_s, "test")
        start = exp.model.build(train_s) if recal is None else recal
        recal = train(start, train_s, exp)
        if frozen is None:
            frozen = recal
        for label, m in (("recalibrated", recal), ("frozen", frozen)):
            hashes[label].append(m.fingerprint())
            p, e = evaluate(m, test_s, exp)
            rows.extend(_rows(label, "test", test_s, p, e))


# ---------------------------------------------------------------------------
# Output


def report_name(report: EvalReport, date: str) -> str:
    return f"{report.experiment}_{date}_{report.seed}"


def write_report(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    """``{kind}_{date}_{seed}.json`` (full) and ``..._agg.csv`` (aggregates), date being the first day."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    date = min((r.date for r in report.rows), default="none")
    stem = report_name(report, date)
    jp, cp = out / f"{stem}.json", out / f"{stem}_agg.csv"
    jp.write_text(json.dumps(report.to_json(), indent=1, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")
    cp.write_text(aggregates_csv(report.aggregates), encoding="utf-8", newline="")
    return jp, cp


REPORT_KEYS = {"format", "experiment", "engine", "model", "seed", "rows", "aggregates", "daily", "noise_floor",
               "param_hashes"}
ROW_KEYS = {f for f in ContractRow.__dataclass_fields__}


def validate_report(obj: dict) -> None:
    """Raise ExperimentError unless ``obj`` has the report schema."""
    if obj.get("format") != REPORT_FORMAT:
        raise ExperimentError(f"unknown report format {obj.get('format')!r}")
    missing = REPORT_KEYS - obj.keys()
    if missing:
        raise ExperimentError(f"report lacks {sorted(missing)}")
    for i, r in enumerate(obj["rows"]):
        if set(r) != ROW_KEYS:
            raise ExperimentError(f"row {i} has fields {sorted(r)}")
        if r["split"] not in ("train", "test") or r["payoff"] not in (CALL, PUT):
            raise ExperimentError(f"row {i} has an invalid split or payoff")
    for a in obj["aggregates"]:
        if set(a) != {"group", "n", "mse", "mae", "rel_mae"}:
            raise ExperimentError("malformed aggregate row")

