"""Explicit finite-difference solver for the Kolmogorov backward equation.

The value tensor has one row per spatial node (``S``-major, then ``Y``) and one
column per contract, so every contract advances in the same sparse update.
Each time step is a single fused tape operation whose vector-Jacobian
product is written by hand; gradients therefore flow through the solver to
the model coefficients and on to the parameters.

Boundary rules
--------------
* ``S = 0``: Dirichlet, ``v = g(0) exp(-r (T_i - t))``.
* ``S = S_max``: the second derivative is dropped and the first derivative is
  a backward difference (the solution is linear in ``S`` there).
* ``Y`` edges: the second derivative is dropped and the first derivative is
  one-sided; the cross-derivative stencil inherits the same one-sided rows.
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
import scipy.sparse as sp

from . import net as nx
from .errors import ArgumentError, ContractGridError, DivergenceError, PdeConfigError, SolverError
from .market import DAYS_PER_YEAR, PUT
from .mc import TimeGrid
from .models.sde import SdeModel
from .sgd import CalibrationResult, HistoryRow, StopRule, make_optimizer

logger = logging.getLogger(__name__)

Y_DOMAIN_VARIANCE = (0.0, 1.0)
Y_DOMAIN_FREE = (-3.0, 3.0)


@dataclass
class PdeConfig:
    n_s: int = 200
    n_y: int = 50
    s_max: float | None = None
    s_max_factor: float = 4.0
    y_range: tuple[float, float] | None = None
    steps_per_day: int | None = None  # None: smallest count passing the stability precheck
    c_stab: float = 0.45
    growth_limit: float = 10.0
    retain_times: tuple[float, ...] = ()


def _diff_matrices(n: int, h: float, one_sided_low: bool):
    """First and second difference matrices on ``n`` nodes with the edge rules above."""
    d1 = sp.lil_matrix((n, n))
    d2 = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        d1[i, i - 1], d1[i, i + 1] = -0.5 / h, 0.5 / h
        d2[i, i - 1], d2[i, i], d2[i, i + 1] = 1.0 / h**2, -2.0 / h**2, 1.0 / h**2
    d1[n - 1, n - 2], d1[n - 1, n - 1] = -1.0 / h, 1.0 / h
    if one_sided_low:
        d1[0, 0], d1[0, 1] = -1.0 / h, 1.0 / h
    return d1.tocsr(), d2.tocsr()


@dataclass
class PdeGrid:
    s: np.ndarray
    y: np.ndarray
    time: TimeGrid
    i_s0: int
    s0: float
    steps_per_day: int
    growth_limit: float = 10.0
    retain_times: tuple[float, ...] = ()
    _ops: dict = field(default=None, init=False, repr=False)

    @property
    def ds(self) -> float:
        return float(self.s[1] - self.s[0])

    @property
    def dy(self) -> float:
        return float(self.y[1] - self.y[0]) if self.y.size > 1 else 0.0

    @property
    def dt(self) -> float:
        return self.time.dt

    @property
    def n_nodes(self) -> int:
        return self.s.size * self.y.size

    @property
    def two_d(self) -> bool:
        return self.y.size > 1

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        ss, yy = np.meshgrid(self.s, self.y, indexing="ij")
        return ss.reshape(-1), yy.reshape(-1)

    def operators(self) -> list:
        """Sparse operators for the terms (mu_S, sigma_S^2/2, mu_Y, sigma_Y^2/2, cross), in that order."""
        if self._ops is None:
            ns, ny = self.s.size, self.y.size
            d1s, d2s = _diff_matrices(ns, self.ds, one_sided_low=False)
            if ny == 1:
                ops = [d1s, d2s]
            else:
                d1y, d2y = _diff_matrices(ny, self.dy, one_sided_low=True)
                i_y = sp.identity(ny, format="csr")
                i_s = sp.identity(ns, format="lil")
                i_s[0, 0] = 0.0
                i_s = i_s.tocsr()
                ops = [sp.kron(d1s, i_y), sp.kron(d2s, i_y), sp.kron(i_s, d1y), sp.kron(i_s, d2y), sp.kron(d1s, d1y)]
            ops = [o.tocsr() for o in ops]
            self._ops = {"ops": ops, "opsT": [o.T.tocsr() for o in ops]}
        return self._ops["ops"]

    def operators_t(self) -> list:
        self.operators()
        return self._ops["opsT"]


def _coefficient_fields(model: SdeModel, grid: PdeGrid, t: float, theta) -> list:
    ss, yy = grid.nodes()
    c = model.coeffs(ss, yy, t, theta)
    n = grid.n_nodes
    zero = np.zeros(n)

    def full(x):
        return x + zero if np.shape(nx.value(x)) != (n,) else x

    fields = [full(c.mu_s), full(0.5 * c.sigma_s * c.sigma_s)]
    if grid.two_d:
        fields += [full(c.mu_y), full(0.5 * c.sigma_y * c.sigma_y), full(c.rho * c.sigma_s * c.sigma_y)]
    return fields


def _model_y_domain(model: SdeModel) -> tuple[float, float]:
    dom = getattr(model, "y_domain", None)
    if dom is not None:
        return dom
    return Y_DOMAIN_VARIANCE if hasattr(model, "values") else Y_DOMAIN_FREE


def build_grid(model: SdeModel, contracts: Sequence, s0: float, config: PdeConfig | None = None,
               theta=None) -> PdeGrid:
    """Space-time grid containing ``s0`` as a node, with the time step set by the stability precheck.

    The precheck requires ``dt <= c_stab * min(dS^2 / sigma_S^2, dY^2 / sigma_Y^2)``
    over all nodes at t = 0, T/2 and T.  An explicit ``steps_per_day`` that
    violates it is a configuration error.
    """
    cfg = config or PdeConfig()
    if not contracts:
        raise ArgumentError("no contracts to price")
    if not s0 > 0:
        raise PdeConfigError(f"spot must be positive, got {s0}")
    if cfg.n_s < 4 or (model.dim == 2 and cfg.n_y < 4):
        raise PdeConfigError("each axis needs at least 3 interior nodes")
    for c in contracts:
        if not hasattr(c, "maturity_days"):
            raise ContractGridError("the PDE engine needs contracts quoted in whole days")
    k_max = max(c.strike for c in contracts)
    s_max = cfg.s_max if cfg.s_max is not None else cfg.s_max_factor * max(s0, k_max)
    i0 = max(1, int(round(s0 / (s_max / cfg.n_s))))
    if i0 >= cfg.n_s:
        raise PdeConfigError(f"S_max = {s_max} does not exceed the spot {s0}")
    s = np.arange(cfg.n_s + 1) * (s0 / i0)
    s[i0] = s0
    if model.dim == 2:
        lo, hi = cfg.y_range if cfg.y_range is not None else _model_y_domain(model)
        if not lo < hi:
            raise PdeConfigError("Y range is inverted")
        y = np.linspace(lo, hi, cfg.n_y + 1)
    else:
        y = np.zeros(1)
    days = max(c.maturity_days for c in contracts)
    probe = PdeGrid(s, y, TimeGrid(days / DAYS_PER_YEAR, days), i0, s0, 1)
    th = model.params if theta is None else nx.value(theta)
    ratio = 0.0
    ss, yy = probe.nodes()
    inner = (ss > 0) & (ss < s[-1])
    n_drift = 0
    for t in (0.0, 0.5 * probe.time.T, probe.time.T):
        c = model.coeffs(ss, yy, t, th)
        sig2 = nx.value(c.sigma_s) ** 2 + np.zeros(ss.shape)
        ratio = max(ratio, float(np.max(sig2)) / probe.ds**2)
        # central drift differences keep non-negative weights only while sigma^2 >= |mu| * h
        n_drift = max(n_drift, int(np.sum(inner & (sig2 < np.abs(nx.value(c.mu_s)) * probe.ds))))
        if probe.two_d:
            ratio = max(ratio, float(np.max(nx.value(c.sigma_y) ** 2)) / probe.dy**2)
    if n_drift > 0.01 * ss.size:
        logger.warning("drift dominates diffusion at %d of %d nodes; refine n_s for a monotone scheme",
                       n_drift, ss.size)
    dt_max = cfg.c_stab / ratio if ratio > 0 else math.inf
    day = 1.0 / DAYS_PER_YEAR
    if cfg.steps_per_day is not None:
        k = int(cfg.steps_per_day)
        if k < 1:
            raise PdeConfigError("steps_per_day must be >= 1")
        if day / k > dt_max:
            raise PdeConfigError(
                f"explicit scheme unstable: dt = {day / k:.3e} exceeds {dt_max:.3e}; "
                f"use at least {math.ceil(day / dt_max)} steps per day"
            )
    else:
        k = max(1, math.ceil(day / dt_max * (1 - 1e-12)))
    return PdeGrid(s, y, TimeGrid(days / DAYS_PER_YEAR, days * k), i0, s0, k, cfg.growth_limit,
                   tuple(cfg.retain_times))


# ---------------------------------------------------------------------------
# Exercise schedules


@dataclass(frozen=True)
class ExerciseSchedule:
    """Exercise dates in years, or every time step (American)."""

    dates: tuple[float, ...] = ()
    every_step: bool = False

    @classmethod
    def none(cls) -> "ExerciseSchedule":
        return cls()

    @classmethod
    def american(cls) -> "ExerciseSchedule":
        return cls(every_step=True)

    @classmethod
    def bermudan(cls, interval_days: int, maturity_days: int) -> "ExerciseSchedule":
        if interval_days < 1:
            raise ArgumentError("exercise interval must be at least one day")
        return cls(tuple(d / DAYS_PER_YEAR for d in range(interval_days, maturity_days + 1, interval_days)))

    def steps(self, grid: PdeGrid, last: int) -> set[int]:
        if self.every_step:
            return set(range(0, last + 1))
        out = set()
        for d in self.dates:
            n = grid.time.index_of(d)
            if n <= last:
                out.add(n)
        return out


def schedule_for(contract) -> ExerciseSchedule:
    if contract.style == "A":
        return ExerciseSchedule.american()
    if contract.style == "B":
        return ExerciseSchedule.bermudan(contract.exercise_interval_days, contract.maturity_days)
    return ExerciseSchedule.none()


# ---------------------------------------------------------------------------
# Fused tape operations


def _step_op(V, fields, grid: PdeGrid, r: float, act: np.ndarray, bc: np.ndarray):
    ops, ops_t = grid.operators(), grid.operators_t()
    dt = grid.dt
    vv = nx.value(V)
    fv = [nx.value(f) for f in fields]
    dv = [op @ vv for op in ops]
    upd = vv * (1.0 - r * dt)
    for f, d in zip(fv, dv):
        upd += dt * (f[:, None] * d)
    n_y = grid.y.size
    upd[:n_y] = bc
    out = np.where(act, upd, vv)

    def vjp(g):
        gh = g * act
        gh[:n_y] = 0.0
        gv = g * ~act + gh * (1.0 - r * dt)
        grads_f = []
        for f, d, opt in zip(fv, dv, ops_t):
            gv += dt * (opt @ (f[:, None] * gh))
            grads_f.append(dt * np.einsum("ij,ij->i", gh, d))
        return [gv, *grads_f]

    return nx.custom_op(out, [V, *fields], vjp)


def _exercise_op(V, G: np.ndarray, mask: np.ndarray):
    """``max(V, G)`` in the masked columns; ties keep the continuation value (and its adjoint)."""
    vv = nx.value(V)
    take = mask & (G > vv)
    out = np.where(take, G, vv)
    return nx.custom_op(out, [V], lambda g: [g * ~take])


# ---------------------------------------------------------------------------
# Solvers


@dataclass
class PdeSolution:
    grid: PdeGrid
    contracts: tuple
    values: np.ndarray  # (contracts, S nodes, Y nodes) at t = 0
    prices: object  # ndarray or tape variable, one entry per contract
    retained: dict[float, np.ndarray] = field(default_factory=dict)
    theta: object = None
    tape: nx.Tape | None = None

    def price_values(self) -> np.ndarray:
        return np.asarray(nx.value(self.prices))

    def slope(self, y0: float | None = None) -> np.ndarray:
        """Central difference of the t = 0 slice at s0 (interpolated in Y)."""
        i = self.grid.i_s0
        v = self._y_interp(self.values, y0)
        return (v[:, i + 1] - v[:, i - 1]) / (2 * self.grid.ds)

    def _y_interp(self, vals, y0):
        if not self.grid.two_d:
            return vals[:, :, 0]
        y = self.grid.y
        y0 = float(y[0] if y0 is None else y0)
        j = int(np.clip(np.searchsorted(y, y0) - 1, 0, y.size - 2))
        w = (y0 - y[j]) / (y[j + 1] - y[j])
        return (1 - w) * vals[:, :, j] + w * vals[:, :, j + 1]


def solve_european(model: SdeModel, grid: PdeGrid, contracts: Sequence, r: float | None = None,
                   record_tape: bool = False, theta=None) -> PdeSolution:
    """Backward explicit stepping from the payoffs; no early exercise."""
    for c in contracts:
        if getattr(c, "style", "E") != "E":
            raise ArgumentError(f"{c.id}: early-exercise contract passed to the European solver")
    return _solve(model, grid, contracts, [ExerciseSchedule.none()] * len(contracts), r, record_tape, theta)


def solve_bermudan(model: SdeModel, grid: PdeGrid, contracts: Sequence, schedule: ExerciseSchedule | None = None,
                   r: float | None = None, record_tape: bool = False, theta=None) -> PdeSolution:
    """As :func:`solve_european` with ``v <- max(v, g)`` at every exercise date.

    Without ``schedule`` each contract's own style decides (European, American
    or Bermudan); an explicit schedule applies to every contract.
    """
    scheds = [schedule_for(c) for c in contracts] if schedule is None else [schedule] * len(contracts)
    return _solve(model, grid, contracts, scheds, r, record_tape, theta)


def _solve(model, grid: PdeGrid, contracts, schedules, r, record_tape, theta) -> PdeSolution:
    contracts = tuple(contracts)
    n = len(contracts)
    if n == 0:
        raise ArgumentError("no contracts to price")
    r = model.rate if r is None else float(r)
    tape = None
    if record_tape and theta is None:
        tape = nx.Tape()
        theta = tape.variable(model.params)
    elif isinstance(theta, nx.Var):
        tape = theta.tape
    elif theta is None:
        theta = model.params
    dt = grid.dt
    mat = np.array([grid.time.index_of(c.maturity) for c in contracts])
    m_max = int(mat.max())
    strikes = np.array([c.strike for c in contracts])
    is_put = np.array([c.payoff == PUT for c in contracts])
    ss, _ = grid.nodes()
    G = np.where(is_put, np.maximum(strikes - ss[:, None], 0.0), np.maximum(ss[:, None] - strikes, 0.0))
    g0 = np.where(is_put, strikes, 0.0)
    ex_steps = [s.steps(grid, int(mat[i])) for i, s in enumerate(schedules)]
    any_ex = set().union(*ex_steps)
    retain = {}
    for t in grid.retain_times:
        retain[grid.time.index_of(t, snap=True)] = t

    V = G.copy()
    fields = None
    if model.time_homogeneous:
        fields = _coefficient_fields(model, grid, 0.0, theta)
    floor = 1e-12 * (1.0 + strikes.max())
    norm = float(np.abs(G).max())
    kept: dict[float, np.ndarray] = {}
    for m in range(m_max - 1, -1, -1):
        if not model.time_homogeneous:
            fields = _coefficient_fields(model, grid, (m + 1) * dt, theta)
        act = (m < mat)[None, :]
        bc = g0 * np.exp(-r * (mat - m) * dt)
        V = _step_op(V, fields, grid, r, act, bc)
        if m in any_ex:
            mask = np.array([m in e for e in ex_steps])[None, :] & act
            V = _exercise_op(V, G, mask)
        vv = nx.value(V)
        new_norm = float(np.abs(vv).max())
        if not math.isfinite(new_norm) or new_norm > grid.growth_limit * max(norm, floor):
            raise SolverError(f"solution grew from {norm:.3e} to {new_norm:.3e} in one step", m)
        norm = new_norm
        if m in retain:
            kept[retain[m]] = vv.T.reshape(n, grid.s.size, grid.y.size).copy()
    if m_max == 0:  # pragma: no cover - maturities are at least one day
        raise ContractGridError("zero maturity")
    values = nx.value(V).T.reshape(n, grid.s.size, grid.y.size)
    prices = _extract(V, grid, model.initial_y(theta))
    return PdeSolution(grid, contracts, values.copy(), prices, kept, theta, tape)


def _extract(V, grid: PdeGrid, y0):
    ny = grid.y.size
    base = grid.i_s0 * ny
    if ny == 1:
        return V[base]
    y = grid.y
    y0v = float(nx.value(y0))
    if not y[0] <= y0v <= y[-1]:
        raise PdeConfigError(f"initial Y = {y0v} lies outside the grid [{y[0]}, {y[-1]}]")
    j = int(np.clip(np.searchsorted(y, y0v) - 1, 0, ny - 2))
    va, vb = V[base + j], V[base + j + 1]
    w = (y0 - y[j]) * (1.0 / (y[j + 1] - y[j]))
    return va + w * (vb - va)


def price(model: SdeModel, contracts: Sequence, s0: float, r: float | None = None,
          config: PdeConfig | None = None, schedule: ExerciseSchedule | None = None) -> PdeSolution:
    """Build a grid and solve, honouring each contract's exercise style."""
    cfg = config or PdeConfig()
    grid = build_grid(model, contracts, s0, cfg)
    return solve_bermudan(model, grid, contracts, schedule, r)


def discretization_estimate(model: SdeModel, contracts: Sequence, s0: float, r: float | None = None,
                            config: PdeConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Prices and a Richardson-style error estimate ``|P(dS) - P(2 dS)| / 3``."""
    cfg = config or PdeConfig()
    fine = price(model, contracts, s0, r, cfg).price_values()
    coarse_cfg = PdeConfig(**{**cfg.__dict__, "n_s": max(4, cfg.n_s // 2), "n_y": max(4, cfg.n_y // 2),
                              "steps_per_day": None})
    coarse = price(model, contracts, s0, r, coarse_cfg).price_values()
    return fine, np.abs(fine - coarse) / 3.0


SLICE_COLUMNS = ("contract_id", "t", "S", "Y", "value")


def dump_slices(solution: PdeSolution, path: str | Path | None = None) -> str:
    """CSV of every retained slice (and the t = 0 slice)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SLICE_COLUMNS)
    slices = dict(solution.retained)
    slices[0.0] = solution.values
    g = solution.grid
    for t in sorted(slices):
        vals = slices[t]
        for ci, c in enumerate(solution.contracts):
            for i, s in enumerate(g.s):
                for j, yv in enumerate(g.y):
                    w.writerow([c.id, repr(float(t)), repr(float(s)), repr(float(yv)), repr(float(vals[ci, i, j]))])
    if path is not None:
        Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Calibration through the solver


def _loss_fn(loss: str | Callable):
    if callable(loss):
        return loss
    if loss == "mse":
        return lambda z, v: (z - v) * (z - v)
    if loss == "huber":
        delta = 1e-3

        def huber(z, v):
            e = v - z
            return nx.sqrt(e * e + delta * delta) - delta

        return huber
    if loss == "rel_mse":
        def rel(z, v):
            e = (v - z) / np.where(np.abs(z) > 0, z, 1.0)
            return e * e

        return rel
    raise ArgumentError(f"unknown loss {loss!r}; choose mse, huber or rel_mse")


@dataclass
class PdeCalConfig:
    pde: PdeConfig = field(default_factory=PdeConfig)
    loss: str = "mse"
    learning_rate: float = 1e-3
    max_iters: int = 500
    optimizer: str = "adam"
    normalize: bool = True
    patience: int = 50
    rel_tol: float = 1e-5
    smoothing: int = 1
    rebuild_grid: bool = True  # re-run the stability precheck whenever parameters change


def pde_objective(model: SdeModel, snapshot, loss: str | Callable = "mse", schedule: ExerciseSchedule | None = None,
                  config: PdeConfig | None = None, theta=None, grid: PdeGrid | None = None,
                  normalize: bool = True):
    """``(1/N) sum_i loss(P_market_i, P_i)`` with prices from the solver; returns ``(objective, solution)``.

    When ``theta`` is a tape variable the objective is a tape variable too.
    """
    contracts = list(snapshot.contracts)
    if not contracts:
        raise ArgumentError("objective needs a non-empty snapshot")
    m = model.with_market(snapshot.rate, snapshot.dividend)
    th = m.params if theta is None else theta
    if grid is None:
        grid = build_grid(m, contracts, snapshot.spot, config, th)
    sol = solve_bermudan(m, grid, contracts, schedule, snapshot.rate, theta=th)
    scale = snapshot.spot if normalize else 1.0
    mkt = np.array([c.market_price for c in contracts]) / scale
    ell = _loss_fn(loss)
    obj = ell(mkt, sol.prices * (1.0 / scale)).mean()
    return obj, sol


def calibrate_pde(model: SdeModel, snapshot, loss: str | Callable = "mse", schedule: ExerciseSchedule | None = None,
                  config: PdeCalConfig | None = None,
                  callbacks: Sequence[Callable[[int, np.ndarray, HistoryRow], None]] = ()) -> CalibrationResult:
    """Gradient descent on the solver objective with exact (tape) gradients."""
    cfg = config or PdeCalConfig()
    loss = loss if loss is not None else cfg.loss
    theta = model.params.copy()
    opt = make_optimizer(cfg.optimizer, theta.size)
    rule = StopRule(cfg.patience, cfg.rel_tol, cfg.smoothing)
    history: list[HistoryRow] = []
    grid = None
    converged = False
    k = 0
    for k in range(1, cfg.max_iters + 1):
        if grid is None or cfg.rebuild_grid:
            grid = build_grid(model.with_market(snapshot.rate, snapshot.dividend), list(snapshot.contracts),
                              snapshot.spot, cfg.pde, theta)
        tape = nx.Tape()
        th = tape.variable(theta)
        obj, _ = pde_objective(model, snapshot, loss, schedule, cfg.pde, th, grid, cfg.normalize)
        value = float(nx.value(obj))
        if not math.isfinite(value):
            raise DivergenceError("non-finite objective", k)
        g = nx.grad(tape, obj, th) if isinstance(obj, nx.Var) else np.zeros_like(theta)
        row = HistoryRow(k - 1, value, float(np.linalg.norm(g)), cfg.learning_rate)
        history.append(row)
        for cb in callbacks:
            cb(k - 1, theta, row)
        if rule.update(value):
            converged = True
            break
        theta = theta - opt.step(g, cfg.learning_rate)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError("non-finite parameters", k)
    return CalibrationResult(model.with_params(theta), history, converged, k if cfg.max_iters else 0)
