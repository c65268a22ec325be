"""Calibration by stochastic gradient descent over simulated paths.

The unbiased estimator prices every contract on two independent batches:
batch A (paths ``[0, L)``) supplies the residual ``P_market - P^A`` as a
constant, batch B (paths ``[L, 2L)``) is simulated on a tape and supplies
``grad P^B``.  Because the two factors are independent, the expectation of
their product is the gradient of the true mean squared error.  The biased
estimator uses one batch for both factors.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import net as nx
from .errors import ArgumentError, DivergenceError
from .mc import TimeGrid, _maturity_steps, price_european, simulate
from .models.sde import SdeModel

logger = logging.getLogger(__name__)

UNBIASED, BIASED = "unbiased", "biased"
PLAIN_SGD, ADAM = "sgd", "adam"

# Iteration k of a run seeded with s draws from Philox key s * _ITER_STRIDE + k;
# the held-out evaluation batch uses key s * _ITER_STRIDE + _EVAL_OFFSET.
_ITER_STRIDE = 1 << 40
_EVAL_OFFSET = (1 << 40) - 1


@dataclass
class SgdConfig:
    L: int = 4096
    learning_rate: float | Callable[[int], float] = 1e-3
    max_iters: int = 2000
    seed: int = 0
    optimizer: str = ADAM
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    normalize: bool = True  # losses on prices divided by s0
    eval_L: int = 4096
    eval_every: int = 1
    patience: int = 200
    rel_tol: float = 1e-5
    smoothing: int = 10
    estimator: str = UNBIASED

    def __post_init__(self):
        if self.L < 1:
            raise ArgumentError("L must be >= 1")
        if self.optimizer not in (PLAIN_SGD, ADAM):
            raise ArgumentError(f"unknown optimizer {self.optimizer!r}")
        if self.estimator not in (UNBIASED, BIASED):
            raise ArgumentError(f"unknown estimator {self.estimator!r}")
        if not callable(self.learning_rate) and self.learning_rate < 0:
            raise ArgumentError("learning rate must be non-negative")

    def lr(self, k: int) -> float:
        return float(self.learning_rate(k)) if callable(self.learning_rate) else float(self.learning_rate)


@dataclass
class GradEstimate:
    vector: np.ndarray
    prices_a: np.ndarray
    prices_b: np.ndarray
    kind: str


def _setup(model: SdeModel, snapshot):
    contracts = list(snapshot.contracts)
    if not contracts:
        raise ArgumentError("gradient needs a non-empty snapshot")
    m = model.with_market(snapshot.rate, snapshot.dividend)
    mkt = np.array([c.market_price for c in contracts], dtype=np.float64)
    return m, contracts, mkt


def _scale(config: SgdConfig, snapshot) -> float:
    return float(snapshot.spot) if config.normalize and snapshot.spot > 0 else 1.0


def _surrogate_grad(batch, contracts, r, residual, scale) -> np.ndarray:
    """Gradient of ``-(2/N) sum_i residual_i * P_i^B / scale`` with the residual held constant."""
    pb = price_european(batch, contracts, r, with_stderr=False).values
    n = len(contracts)
    if not isinstance(pb, nx.Var):  # parameters do not reach the prices
        return np.zeros(batch.theta.shape if batch.theta is not None else 0), nx.value(pb)
    loss = (pb * (residual * (-2.0 / (n * scale)))).sum()
    return nx.grad(batch.tape, loss, batch.theta), nx.value(pb)


def grad_unbiased(model: SdeModel, grid: TimeGrid, config: SgdConfig, snapshot, seed: int | None = None,
                  theta: np.ndarray | None = None) -> GradEstimate:
    """Two-batch estimate of the gradient of the mean squared pricing error."""
    m, contracts, mkt = _setup(model, snapshot)
    if theta is not None:
        m = m.with_params(theta)
    seed = config.seed if seed is None else seed
    keep = _maturity_steps(grid, contracts)
    L, r = config.L, snapshot.rate
    scale = _scale(config, snapshot)
    a = simulate(m, grid, L, seed, s0=snapshot.spot, path_start=0, keep=keep, retain_draws=False)
    pa = nx.value(price_european(a, contracts, r, with_stderr=False).values)
    residual = (mkt - pa) / scale
    b = simulate(m, grid, L, seed, True, s0=snapshot.spot, path_start=L, keep=keep, retain_draws=False)
    g, pb = _surrogate_grad(b, contracts, r, residual, scale)
    return GradEstimate(np.asarray(g, dtype=np.float64), pa, pb, UNBIASED)


def grad_biased(model: SdeModel, grid: TimeGrid, config: SgdConfig, snapshot, seed: int | None = None,
                theta: np.ndarray | None = None) -> GradEstimate:
    """Single-batch gradient of the sampled objective (biased for finite L)."""
    m, contracts, mkt = _setup(model, snapshot)
    if theta is not None:
        m = m.with_params(theta)
    seed = config.seed if seed is None else seed
    keep = _maturity_steps(grid, contracts)
    scale = _scale(config, snapshot)
    b = simulate(m, grid, config.L, seed, True, s0=snapshot.spot, keep=keep, retain_draws=False)
    pb_var = price_european(b, contracts, snapshot.rate, with_stderr=False).values
    residual = (mkt - nx.value(pb_var)) / scale
    g, pb = _surrogate_grad(b, contracts, snapshot.rate, residual, scale)
    return GradEstimate(np.asarray(g, dtype=np.float64), pb, pb, BIASED)


# ---------------------------------------------------------------------------
# Optimisers


class _Adam:
    def __init__(self, n, b1, b2, eps):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.b1, self.b2, self.eps = b1, b2, eps
        self.k = 0

    def step(self, g, lr):
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1 ** self.k)
        vh = self.v / (1 - self.b2 ** self.k)
        return lr * mh / (np.sqrt(vh) + self.eps)


class _Plain:
    def step(self, g, lr):
        return lr * g


def make_optimizer(kind: str, n: int, beta1=0.9, beta2=0.999, eps=1e-8):
    return _Adam(n, beta1, beta2, eps) if kind == ADAM else _Plain()


class StopRule:
    """Stop once the smoothed metric has not improved by ``rel_tol`` (relative) for ``patience`` updates."""

    def __init__(self, patience: int, rel_tol: float, smoothing: int):
        self.patience, self.rel_tol, self.smoothing = patience, rel_tol, max(1, smoothing)
        self.window: list[float] = []
        self.best = math.inf
        self.since = 0

    def update(self, value: float) -> bool:
        self.window.append(value)
        if len(self.window) > self.smoothing:
            self.window.pop(0)
        sm = sum(self.window) / len(self.window)
        if sm < self.best * (1.0 - self.rel_tol) or self.best == math.inf:
            self.best = sm
            self.since = 0
        else:
            self.since += 1
        return self.since >= self.patience


@dataclass
class HistoryRow:
    iter: int
    train_mse: float
    grad_norm: float
    lr: float


@dataclass
class CalibrationResult:
    model: SdeModel
    history: list[HistoryRow] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    @property
    def params(self) -> nx.ParamVector:
        return self.model.param_vector()


def calibrate(model: SdeModel, grid: TimeGrid | None, config: SgdConfig, snapshot,
              callbacks: Sequence[Callable[[int, np.ndarray, HistoryRow], None]] = ()) -> CalibrationResult:
    """Minimise the mean squared pricing error by SGD with the configured estimator.

    ``train_mse`` in the history is measured on a held-out batch with a fixed
    seed, so it is a smooth function of the parameters.
    """
    contracts = list(snapshot.contracts)
    if not contracts:
        raise ArgumentError("calibration needs a non-empty snapshot")
    grid = grid or TimeGrid.for_contracts(contracts)
    theta = model.params.copy()
    opt = make_optimizer(config.optimizer, theta.size, config.beta1, config.beta2, config.eps)
    rule = StopRule(config.patience, config.rel_tol, config.smoothing)
    estimator = grad_unbiased if config.estimator == UNBIASED else grad_biased
    eval_seed = config.seed * _ITER_STRIDE + _EVAL_OFFSET
    scale = _scale(config, snapshot)
    keep = _maturity_steps(grid, contracts)
    mkt = np.array([c.market_price for c in contracts])
    base = model.with_market(snapshot.rate, snapshot.dividend)

    def eval_mse(th) -> float:
        b = simulate(base.with_params(th), grid, config.eval_L, eval_seed, s0=snapshot.spot, keep=keep,
                     retain_draws=False)
        e = (mkt - price_european(b, contracts, snapshot.rate, with_stderr=False).values) / scale
        return float(np.mean(e * e))

    history: list[HistoryRow] = []
    converged = False
    k = 0
    for k in range(1, config.max_iters + 1):
        est = estimator(base, grid, config, snapshot, seed=config.seed * _ITER_STRIDE + k, theta=theta)
        lr = config.lr(k)
        if lr < 0 or not math.isfinite(lr):
            raise ArgumentError(f"learning rate at step {k} must be non-negative, got {lr}")
        theta = theta - opt.step(est.vector, lr)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError("non-finite parameters", k)
        if k % config.eval_every == 0 or k == config.max_iters:
            row = HistoryRow(k, eval_mse(theta), float(np.linalg.norm(est.vector)), lr)
            history.append(row)
            for cb in callbacks:
                cb(k, theta, row)
            if not math.isfinite(row.train_mse):
                raise DivergenceError("non-finite training error", k)
            if rule.update(row.train_mse):
                converged = True
                break
    logger.info("calibration stopped after %d iterations (converged=%s)", k, converged)
    return CalibrationResult(model.with_params(theta), history, converged, k if config.max_iters else 0)


HISTORY_COLUMNS = ("iter", "train_mse", "grad_norm", "lr")


def write_history(history: Sequence[HistoryRow], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for h in history:
        w.writerow([h.iter, repr(h.train_mse), repr(h.grad_norm), repr(h.lr)])
    if path is not None:
        Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")
    return buf.getvalue()
