"""Euler-Maruyama simulation and Monte Carlo pricing of European claims.

Draws come from :func:`nsde.rng.normals`, keyed by (seed, step, component,
path), so a path's trajectory does not depend on how many other paths are
simulated alongside it.  Component 0 drives ``S``; component 1 is the
independent normal that is mixed with it to drive ``Y``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import net as nx
from .errors import ArgumentError, ContractGridError, SimulationError
from .market import DAYS_PER_YEAR
from .models.sde import SdeModel, sqrt_pos
from .rng import normals

logger = logging.getLogger(__name__)

_GRID_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    T: float
    steps: int

    def __post_init__(self):
        if not self.T > 0 or self.steps < 1:
            raise ArgumentError(f"time grid needs T > 0 and steps >= 1, got T={self.T}, steps={self.steps}")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    @classmethod
    def daily(cls, T: float, steps_per_day: int = 1) -> "TimeGrid":
        days = max(1, int(round(T * DAYS_PER_YEAR)))
        return cls(days / DAYS_PER_YEAR, days * steps_per_day)

    @classmethod
    def for_contracts(cls, contracts: Sequence, steps_per_day: int = 1) -> "TimeGrid":
        """Smallest grid covering every maturity as a node.

        Contracts quoted in whole days get daily steps; other claims get one
        step per unit of their common maturity.
        """
        if not contracts:
            raise ArgumentError("no contracts")
        if all(hasattr(c, "maturity_days") for c in contracts):
            days = max(c.maturity_days for c in contracts)
            return cls(days / DAYS_PER_YEAR, days * steps_per_day)
        T = max(c.maturity for c in contracts)
        return cls(T, steps_per_day)

    def index_of(self, T: float, snap: bool = False) -> int:
        x = T / self.dt
        n = int(round(x))
        if n < 0 or n > self.steps:
            raise ContractGridError(f"maturity {T} lies outside the grid [0, {self.T}]")
        if not snap and abs(x - n) > _GRID_TOL * max(1.0, x):
            raise ContractGridError(f"maturity {T} is not a grid node (dt = {self.dt})")
        return n


@dataclass
class PathBatch:
    """Simulated paths.  ``s_states[n]`` is the array (or tape variable) at step ``n``."""

    grid: TimeGrid
    L: int
    seed: int
    path_start: int
    s_states: dict[int, object]
    y_states: dict[int, object]
    W: np.ndarray | None = None  # (steps, L)
    Z_perp: np.ndarray | None = None
    Z: np.ndarray | None = None
    theta: object = None
    tape: nx.Tape | None = None

    @property
    def S(self) -> np.ndarray:
        """Retained price states as an ``L x len(steps)`` matrix (all steps by default)."""
        return np.stack([nx.value(self.s_states[n]) for n in sorted(self.s_states)], axis=1)

    @property
    def Y(self) -> np.ndarray:
        return np.stack([nx.value(self.y_states[n]) for n in sorted(self.y_states)], axis=1)

    def s_at(self, n: int):
        if n not in self.s_states:
            raise ContractGridError(f"step {n} was not retained")
        return self.s_states[n]


def simulate(model: SdeModel, grid: TimeGrid, L: int, seed: int, record_tape: bool = False, *, theta=None,
             path_start: int = 0, s0: float | None = None, keep: Sequence[int] | None = None,
             retain_draws: bool = True, antithetic: bool = False) -> PathBatch:
    """Euler-Maruyama paths of ``model``.

    With ``record_tape`` every state is a tape variable depending on ``theta``
    (a fresh tape and leaf are created when ``theta`` is not given).  ``keep``
    limits which steps are retained (default: all).  Price models absorb at 0;
    a model can opt out with ``absorbing = False``.
    """
    if L < 1:
        raise ArgumentError(f"need at least one path, got L={L}")
    if antithetic and L % 2:
        raise ArgumentError("antithetic sampling needs an even L")
    tape = None
    if record_tape and theta is None:
        tape = nx.Tape()
        theta = tape.variable(model.params)
    elif isinstance(theta, nx.Var):
        tape = theta.tape
    elif theta is None:
        theta = model.params
    s0 = model.spot if s0 is None else s0
    absorbing = getattr(model, "absorbing", True)
    two_d = model.dim == 2
    dt = grid.dt
    sq = math.sqrt(dt)
    keep_set = set(range(grid.steps + 1)) if keep is None else set(int(k) for k in keep)

    s = np.full(L, float(s0))
    y = None
    if two_d:
        y0 = model.initial_y(theta)
        y = y0 + np.zeros(L) if isinstance(y0, nx.Var) else np.full(L, float(nx.value(y0)))
        rho = model.correlation(theta)
        mix = sqrt_pos(1.0 - rho * rho)
    s_states, y_states = {}, {}
    if 0 in keep_set:
        s_states[0] = s
        if two_d:
            y_states[0] = y
    Ws, Zps, Zs = [], [], []
    n_draw = L // 2 if antithetic else L
    for n in range(grid.steps):
        t = n * dt
        w = normals(seed, n, 0, path_start, n_draw)
        if antithetic:
            w = np.concatenate([w, -w])
        c = model.coeffs(s, y, t, theta)
        s_new = s + c.mu_s * dt + c.sigma_s * (sq * w)
        if absorbing:
            s_new = nx.where(nx.value(s) > 0, nx.maximum(s_new, 0.0), 0.0)
        if two_d:
            zp = normals(seed, n, 1, path_start, n_draw)
            if antithetic:
                zp = np.concatenate([zp, -zp])
            z = rho * w + mix * zp
            y = y + c.mu_y * dt + c.sigma_y * (sq * z)
            if retain_draws:
                Zps.append(zp)
                Zs.append(nx.value(z))
        s = s_new
        if retain_draws:
            Ws.append(w)
        sv = nx.value(s)
        bad = ~np.isfinite(sv)
        if two_d:
            bad |= ~np.isfinite(nx.value(y))
        if bad.any():
            p = int(np.flatnonzero(bad)[0])
            raise SimulationError("non-finite state", path_start + p, n + 1)
        if n + 1 in keep_set:
            s_states[n + 1] = s
            if two_d:
                y_states[n + 1] = y
    batch = PathBatch(grid, L, seed, path_start, s_states, y_states, theta=theta, tape=tape)
    if retain_draws and grid.steps:
        batch.W = np.stack(Ws)
        if two_d:
            batch.Z_perp = np.stack(Zps)
            batch.Z = np.stack(Zs)
    return batch


# ---------------------------------------------------------------------------
# Pricing


def _is_vanilla(c) -> bool:
    return getattr(c, "payoff", None) in ("C", "P") and hasattr(c, "strike")


def _payoffs(contracts, s_t):
    """Payoff matrix ``L x len(contracts)`` on terminal states ``s_t``."""
    if all(_is_vanilla(c) for c in contracts):
        k = np.array([c.strike for c in contracts])
        sign = np.array([1.0 if c.payoff == "C" else -1.0 for c in contracts])
        col = s_t.reshape(-1, 1) if isinstance(s_t, nx.Var) else np.asarray(s_t).reshape(-1, 1)
        return nx.maximum((col - k) * sign, 0.0)
    if len(contracts) == 1:
        return contracts[0].payoff_value(s_t).reshape(-1, 1)
    return nx.stack([c.payoff_value(s_t) for c in contracts], axis=-1)


@dataclass
class McPrices:
    values: object  # ndarray, or tape variable when the batch recorded a tape
    stderr: np.ndarray

    def __len__(self):
        return len(self.stderr)


def price_european(batch: PathBatch, contracts: Sequence, r: float, snap: bool = False,
                   with_stderr: bool = True) -> McPrices:
    """Discounted mean payoff per contract, every contract on the same paths.

    ``stderr`` is NaN when ``with_stderr`` is off or ``L = 1``.
    """
    n = len(contracts)
    if n == 0:
        return McPrices(np.zeros(0), np.zeros(0))
    groups: dict[int, list[int]] = {}
    for i, c in enumerate(contracts):
        groups.setdefault(batch.grid.index_of(c.maturity, snap), []).append(i)
    parts, order = [], []
    stderr = np.full(n, np.nan)
    for step, idx in sorted(groups.items()):
        sub = [contracts[i] for i in idx]
        disc = np.array([math.exp(-r * c.maturity) for c in sub])
        pay = _payoffs(sub, batch.s_at(step))
        if with_stderr and batch.L > 1:
            stderr[idx] = disc * nx.value(pay).std(axis=0, ddof=1) / math.sqrt(batch.L)
        parts.append(pay.mean(axis=0) * disc)
        order.extend(idx)
    if len(parts) == 1:
        return McPrices(parts[0], stderr)
    values = nx.concatenate(parts, axis=0)
    inv = np.empty(n, dtype=np.int64)
    inv[np.array(order)] = np.arange(n)
    if not np.array_equal(inv, np.arange(n)):
        values = values[inv]
    return McPrices(values, stderr)


def objective_mse(model: SdeModel, grid: TimeGrid, L: int, seed: int, snapshot, normalize: bool = False) -> float:
    """Mean squared pricing error on one simulated batch."""
    contracts = list(snapshot.contracts)
    if not contracts:
        raise ArgumentError("objective needs a non-empty snapshot")
    m = model.with_market(snapshot.rate, snapshot.dividend)
    batch = simulate(m, grid, L, seed, s0=snapshot.spot, keep=_maturity_steps(grid, contracts),
                     retain_draws=False)
    p = price_european(batch, contracts, snapshot.rate).values
    mkt = np.array([c.market_price for c in contracts])
    err = mkt - p
    if normalize:
        err = err / snapshot.spot
    return float(np.mean(err * err))


def _maturity_steps(grid: TimeGrid, contracts, snap: bool = False) -> list[int]:
    return sorted({grid.index_of(c.maturity, snap) for c in contracts})


@dataclass
class StreamResult:
    price: np.ndarray
    stderr: np.ndarray
    L: int
    chunks: int = field(default=0)


def price_streaming(model: SdeModel, grid: TimeGrid, contracts: Sequence, L: int, seed: int, r: float,
                    s0: float | None = None, chunk: int = 1 << 17, snap: bool = False) -> StreamResult:
    """Large-``L`` pricing in fixed-size chunks; sums are reduced in chunk order so the result is bit-stable."""
    keep = _maturity_steps(grid, contracts, snap)
    n = len(contracts)
    tot = np.zeros(n)
    tot2 = np.zeros(n)
    disc = np.array([math.exp(-r * c.maturity) for c in contracts])
    steps = [grid.index_of(c.maturity, snap) for c in contracts]
    n_chunks = 0
    for start in range(0, L, chunk):
        m = min(chunk, L - start)
        b = simulate(model, grid, m, seed, path_start=start, s0=s0, keep=keep, retain_draws=False)
        for j, c in enumerate(contracts):
            pay = np.asarray(nx.value(_payoffs([c], b.s_at(steps[j]))))[:, 0]
            tot[j] += pay.sum()
            tot2[j] += (pay * pay).sum()
        n_chunks += 1
    mean = tot / L
    var = np.maximum(tot2 / L - mean * mean, 0.0) * L / max(L - 1, 1)
    return StreamResult(disc * mean, disc * np.sqrt(var / L), L, n_chunks)


def dump_paths(batch: PathBatch, path: str | Path, model: SdeModel | None = None) -> None:
    """Write retained prices as row-major float64 (path, step) plus a JSON sidecar."""
    path = Path(path)
    batch.S.astype("<f8").tofile(path)
    meta = {"T": batch.grid.T, "steps": batch.grid.steps, "retained": sorted(batch.s_states), "L": batch.L,
            "seed": batch.seed, "path_start": batch.path_start,
            "model": None if model is None else model.fingerprint()}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
