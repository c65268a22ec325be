"""Command-line entry point: ``nsde <command> [options]``.

Every option can also come from a TOML file given with ``--config``; keys of
the command's table (e.g. ``[calibrate]``) and model hyperparameters from a
``[hyper]`` table are read, and command-line flags win.  The global seed falls back to
the ``NSDE_SEED`` environment variable.

Exit codes: 0 success (calibration converged), 2 calibration stopped at the
iteration limit, 1 error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import bench, hedge, pde, synth
from .errors import ArgumentError, NsdeError
from .market import EUROPEAN, MarketSnapshot, load_snapshot, pair_contracts
from .mc import TimeGrid, price_streaming
from .models.dupire import NnlvConfig
from .models.sde import NNLV, load_model, save_model
from .sgd import SgdConfig, calibrate, write_history

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("nsde")

EXIT_OK, EXIT_ERROR, EXIT_MAX_ITERS = 0, 1, 2

DEFAULTS = {
    "model": "bs",
    "engine": "pde",
    "seed": None,
    "max_iters": 300,
    "lr": 1e-2,
    "L": 4096,
    "eval_L": 100_000,
    "n_s": None,
    "n_y": None,
    "s_max_factor": None,
    "optimizer": "adam",
    "loss": "mse",
    "patience": 100,
    "threads": None,
    "train_fraction": 0.8,
    "threshold": None,
    "window": None,
    "method": "bs",
    "noise_bps": 0.0,
}


class Settings(dict):
    """Merged options with attribute access."""

    def __getattr__(self, name):
        try:
            return self[name]
        except KeyError:
            raise AttributeError(name) from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _settings(args: argparse.Namespace) -> Settings:
    file_cfg: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        file_cfg = tomllib.loads(path.read_text(encoding="utf-8"))
    merged = Settings(DEFAULTS)
    merged.update({k: v for k, v in file_cfg.items() if not isinstance(v, dict)})
    merged.update(file_cfg.get(args.command, {}))
    hyper = dict(file_cfg.get("hyper", {}))
    for k, v in vars(args).items():
        if v is not None and k not in ("set", "func"):
            merged[k] = v
    for item in args.set or ():
        if "=" not in item:
            raise ArgumentError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        hyper[k.strip()] = _parse_value(v)
    merged["hyper"] = hyper
    if merged.get("seed") is None:
        env = os.environ.get("NSDE_SEED")
        try:
            merged["seed"] = int(env) if env else 0
        except ValueError:
            raise ArgumentError(f"NSDE_SEED must be an integer, got {env!r}") from None
    return merged


def _pde_grid(s: Settings) -> pde.PdeConfig | None:
    if s.n_s is None and s.n_y is None and s.s_max_factor is None:
        return None
    base = pde.PdeConfig()
    return pde.PdeConfig(n_s=int(s.n_s or base.n_s), n_y=int(s.n_y or base.n_y),
                         s_max_factor=float(s.s_max_factor or base.s_max_factor))


def _experiment(s: Settings, kind: str = bench.INTRADAY) -> bench.Experiment:
    exp = bench.Experiment(
        kind=kind,
        model=bench.ModelSpec(s.model, s.hyper, int(s.seed)),
        engine="mc-sgd" if s.engine in ("mc", "mc-sgd") else s.engine,
        seed=int(s.seed),
        train_fraction=float(s.train_fraction),
        threshold=None if s.threshold is None else float(s.threshold),
        window=None if s.window is None else int(s.window),
        sgd=SgdConfig(L=int(s.L), learning_rate=float(s.lr), max_iters=int(s.max_iters), seed=int(s.seed),
                      optimizer=s.optimizer, patience=int(s.patience)),
        pde_cal=pde.PdeCalConfig(loss=s.loss, learning_rate=float(s.lr), max_iters=int(s.max_iters),
                                 optimizer=s.optimizer, patience=int(s.patience)),
        pde_grid=_pde_grid(s),
        eval_L=int(s.eval_L),
        nnlv=NnlvConfig(epochs=int(s.max_iters), optimizer="lbfgs", seed=int(s.seed)),
    )
    exp.validate()
    return exp


def _load(path: str) -> MarketSnapshot:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"data file not found: {p}")
    return load_snapshot(p)


def _out_dir(s: Settings) -> Path:
    out = Path(s.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Commands


def cmd_calibrate(s: Settings) -> int:
    if not s.get("data"):
        raise ArgumentError("calibrate needs --data")
    snap = _load(s.data[0])
    if len(s.data) > 1:
        logger.warning("calibrate uses only the first data file")
    exp = _experiment(s)
    model = exp.model.build(snap)
    if exp.engine != bench.PDE_ENGINE and any(c.style != EUROPEAN for c in snap.contracts):
        raise ArgumentError("the data holds early-exercise contracts; use --engine pde")
    if int(s.max_iters) == 0:
        history, converged, fitted = [], False, model
    elif isinstance(model, NNLV):
        fitted = bench.train(model, snap, exp)
        history, converged = [], False
    elif exp.engine == bench.MC_SGD:
        res = calibrate(model, None, exp.sgd, snap)
        history, converged, fitted = res.history, res.converged, res.model
    else:
        cal = exp.cal_for(model)
        res = pde.calibrate_pde(model, snap, cal.loss, None, cal)
        history, converged, fitted = res.history, res.converged, res.model
    out = _out_dir(s)
    save_model(out / "model.json", fitted)
    write_history(history, out / "history.csv")
    print(f"wrote {out / 'model.json'} ({'converged' if converged else 'stopped at max iterations'})")
    return EXIT_OK if converged else EXIT_MAX_ITERS


PRICE_COLUMNS = ("id", "price", "stderr_or_disc_est")


def _is_blank_table(path: Path) -> bool:
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    return len(lines) <= 1


def cmd_price(s: Settings) -> int:
    if not s.get("checkpoint") or not s.get("contracts"):
        raise ArgumentError("price needs --checkpoint and --contracts")
    ck = Path(s.checkpoint)
    if not ck.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ck}")
    model = load_model(ck)
    cpath = Path(s.contracts)
    if not cpath.is_file():
        raise FileNotFoundError(f"contracts file not found: {cpath}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PRICE_COLUMNS)
    if not _is_blank_table(cpath):
        snap = load_snapshot(cpath)
        contracts = list(snap.contracts)
        m = model.with_market(snap.rate, snap.dividend)
        if s.engine == "pde":
            prices, noise = pde.discretization_estimate(m, contracts, snap.spot, snap.rate, _pde_grid(s))
        else:
            if any(c.style != EUROPEAN for c in contracts):
                raise ArgumentError("early-exercise contracts cannot be priced by Monte Carlo; use --engine pde")
            res = price_streaming(m, TimeGrid.for_contracts(contracts), contracts, int(s.eval_L), int(s.seed),
                                  snap.rate, s0=snap.spot)
            prices, noise = res.price, res.stderr
        for c, p, e in zip(contracts, prices, noise):
            w.writerow([c.id, repr(float(p)), repr(float(e))])
    text = buf.getvalue()
    if s.get("out"):
        Path(s.out).parent.mkdir(parents=True, exist_ok=True)
        Path(s.out).write_text(text, encoding="utf-8", newline="")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _snapshots(s: Settings) -> list[MarketSnapshot]:
    if s.get("data"):
        return [_load(p) for p in s.data]
    return synth.load_bundled(s.get("bundled") or "bs")


def cmd_experiment(s: Settings) -> int:
    kind = s.get("experiment")
    if not kind:
        raise ArgumentError("experiment needs --experiment")
    exp = _experiment(s, kind)
    report = bench.run(exp, _snapshots(s))
    jp, cp = bench.write_report(report, _out_dir(s))
    for a in report.aggregates:
        label = ";".join(f"{k}={v}" for k, v in a.group.items()) or "overall"
        print(f"{label}: n={a.n} mse={a.mse:.6g} mae={a.mae:.6g} relMAE={a.rel_mae:.4g}%")
    print(f"wrote {jp} and {cp}")
    return EXIT_OK


def cmd_hedge(s: Settings) -> int:
    out = _out_dir(s)
    if s.get("world") == "gbm":
        world = hedge.GbmWorld()
        records = world.records(int(s.seed))
        baseline = hedge.hedge_errors(world.records(int(s.seed), hedge=False))
    else:
        snaps = sorted(_snapshots(s), key=lambda x: x.date)
        model = load_model(s.checkpoint) if s.get("checkpoint") else None
        method = s.method

        def delta_fn(snap: MarketSnapshot, c) -> float:
            pair = None
            if method == hedge.BS_CLOSED and c.payoff == "P":
                pair = next((p for p in pair_contracts(snap) if p.put.key() == c.key()), None)
            return hedge.delta(model, c, snap.spot, method=method, seed=int(s.seed), r=snap.rate, d=snap.dividend,
                               pair=pair, L=int(s.eval_L), pde_config=_pde_grid(s))

        records = hedge.backtest(snaps, delta_fn)
        if not records:
            raise ArgumentError("no contract is quoted on two consecutive days")
        baseline = hedge.hedge_errors([hedge.HedgeRecord(r.t, r.p_t, r.p_next, r.s_t, r.s_next, 0.0, r.contract_id)
                                       for r in records])
    err = hedge.hedge_errors(records)
    hedge.hedge_report(records, out / "hedge_report.csv")
    summary = {"mae": err.mae, "mse": err.mse, "rel_mae": err.rel_mae, "n": err.n,
               "baseline_rel_mae": baseline.rel_mae, "baseline_mae": baseline.mae}
    (out / "hedge_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"relMAE {err.rel_mae:.4g}% (no hedge: {baseline.rel_mae:.4g}%), MAE {err.mae:.6g}, MSE {err.mse:.6g}")
    return EXIT_OK


def cmd_synth(s: Settings) -> int:
    out = _out_dir(s)
    kind = s.get("kind") or "bs"
    if kind == "bundle":
        paths = synth.write_bundle(out, int(s.seed))
    elif kind == "bs":
        world = synth.BsWorld(sigma=float(s.hyper.get("sigma", 0.2)))
        paths = []
        for snap in synth.bs_days(world=world, seed=int(s.seed), noise_bps=float(s.noise_bps)):
            p = out / f"synth_bs_{snap.date.isoformat()}.csv"
            synth.export_snapshot(snap, p)
            paths.append(p)
    elif kind == "heston":
        snap = synth.heston_snapshot(synth.BUNDLED_HESTON_DATE, noise_bps=float(s.noise_bps), seed=int(s.seed),
                                     config=_pde_grid(s))
        p = out / f"synth_heston_{snap.date.isoformat()}.csv"
        synth.export_snapshot(snap, p)
        paths = [p]
    else:
        raise ArgumentError(f"unknown synthetic data kind {kind!r}")
    for p in paths:
        print(p)
    return EXIT_OK


PLOT_COLUMNS = ("variant", "date", "split", "id", "payoff", "style", "market", "model", "abs_err", "rel_err")


def cmd_export_plots(s: Settings) -> int:
    """Plot-ready CSVs (per-contract points and per-day aggregates) from a report JSON."""
    rp = Path(s.get("report") or "")
    if not rp.is_file():
        raise FileNotFoundError(f"report not found: {rp}")
    obj = json.loads(rp.read_text(encoding="utf-8"))
    bench.validate_report(obj)
    out = _out_dir(s)
    stem = rp.stem
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_COLUMNS)
    for r in obj["rows"]:
        w.writerow([r[c] if isinstance(r[c], str) else repr(r[c]) for c in PLOT_COLUMNS])
    (out / f"{stem}_points.csv").write_text(buf.getvalue(), encoding="utf-8", newline="")
    daily = [bench.AggRow(**a) for a in obj["daily"]]
    (out / f"{stem}_daily.csv").write_text(bench.aggregates_csv(daily), encoding="utf-8", newline="")
    print(out / f"{stem}_points.csv")
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "price": cmd_price,
    "experiment": cmd_experiment,
    "hedge": cmd_hedge,
    "synth": cmd_synth,
    "export-plots": cmd_export_plots,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsde", description="Neural SDE option-model calibration toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="TOML file with options (flags override it)")
        p.add_argument("--seed", type=int, help="global seed (default: $NSDE_SEED or 0)")
        p.add_argument("--threads", type=int, help="cap on BLAS/worker threads")
        p.add_argument("--out", help="output directory (price: output file)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="model hyperparameter (repeatable)")

    def model_opts(p: argparse.ArgumentParser) -> None:
        p.add_argument("--model", help="model kind: bs, heston, 2dnn, 2dnn_heston, sdenn, sdenn_drift, nnlv")
        p.add_argument("--engine", choices=["mc", "mc-sgd", "pde"], help="calibration/pricing engine")
        p.add_argument("--max-iters", type=int, dest="max_iters", help="optimiser iteration limit")
        p.add_argument("--lr", type=float, help="learning rate")
        p.add_argument("--L", type=int, help="Monte Carlo paths per half-batch")
        p.add_argument("--eval-L", type=int, dest="eval_L", help="Monte Carlo paths for evaluation")
        p.add_argument("--optimizer", choices=["adam", "sgd"])
        p.add_argument("--loss", choices=["mse", "huber", "rel_mse"], help="PDE calibration loss")
        p.add_argument("--patience", type=int, help="stop after this many non-improving iterations")
        p.add_argument("--n-s", type=int, dest="n_s", help="PDE price nodes")
        p.add_argument("--n-y", type=int, dest="n_y", help="PDE second-factor nodes")
        p.add_argument("--s-max-factor", type=float, dest="s_max_factor", help="PDE upper boundary / s0")

    p = sub.add_parser("calibrate", help="fit a model to one snapshot and write a checkpoint")
    common(p), model_opts(p)
    p.add_argument("--data", nargs="+", help="snapshot CSV")

    p = sub.add_parser("price", help="price a contracts file with a checkpointed model")
    common(p), model_opts(p)
    p.add_argument("--checkpoint", help="model checkpoint JSON")
    p.add_argument("--contracts", help="contracts CSV (snapshot format)")

    p = sub.add_parser("experiment", help="run an evaluation protocol")
    common(p), model_opts(p)
    p.add_argument("--experiment", choices=list(bench.KINDS))
    p.add_argument("--data", nargs="+", help="snapshot CSVs (default: bundled synthetic data)")
    p.add_argument("--bundled", choices=["bs", "heston"], help="bundled data set when --data is absent")
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--threshold", type=float, help="strike threshold for strike-extrapolation")
    p.add_argument("--window", type=int, help="number of days for recalibration")

    p = sub.add_parser("hedge", help="delta-hedging backtest")
    common(p), model_opts(p)
    p.add_argument("--world", choices=["gbm"], help="simulated self-consistent world instead of data")
    p.add_argument("--data", nargs="+", help="consecutive snapshot CSVs")
    p.add_argument("--bundled", choices=["bs", "heston"])
    p.add_argument("--checkpoint", help="model checkpoint for mc/pde deltas")
    p.add_argument("--method", choices=list(hedge.METHODS), help="delta method")

    p = sub.add_parser("synth", help="write synthetic snapshots")
    common(p)
    p.add_argument("--kind", choices=["bs", "heston", "bundle"])
    p.add_argument("--noise-bps", type=float, dest="noise_bps", help="uniform relative price noise")
    p.add_argument("--n-s", type=int, dest="n_s")
    p.add_argument("--n-y", type=int, dest="n_y")
    p.add_argument("--s-max-factor", type=float, dest="s_max_factor")

    p = sub.add_parser("export-plots", help="plot-ready CSVs from an experiment report")
    common(p)
    p.add_argument("--report", help="report JSON written by 'experiment'")
    return parser


@contextlib.contextmanager
def _thread_limit(n: int | None):
    if n is None:
        yield
        return
    if n < 1:
        raise ArgumentError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        settings = _settings(args)
        with _thread_limit(settings.get("threads")):
            return COMMANDS[args.command](settings)
    except FileNotFoundError as exc:
        print(f"nsde: error: {exc}", file=sys.stderr)
    except (NsdeError, ValueError, OSError, KeyError, tomllib.TOMLDecodeError) as exc:
        print(f"nsde: error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
