"""Dupire local variance from call-price surfaces, and the neural call-surface fit.

Three surface flavours expose ``derivatives(K, T) -> (C, C_T, C_K, C_KK)``:
:class:`FunctionSurface` (central differences of any callable),
:class:`VolSurface` (interpolated implied vols, central differences) and
:class:`NetworkSurface` (exact input derivatives of an MLP).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.interpolate import PchipInterpolator, RegularGridInterpolator
from scipy.optimize import minimize

from .. import net as nx
from ..errors import ArgumentError, TrainingError
from .closed_form import bs_price

logger = logging.getLogger(__name__)

SIGMA2_MIN = 1e-6
SIGMA2_MAX = 4.0
CONVEXITY_EPS = 1e-8


class DupireResult(NamedTuple):
    variance: object  # ndarray or Var
    n_clamped: int


def dupire_variance(c, c_t, c_k, c_kk, k, r: float, d: float, s0: float = 1.0) -> DupireResult:
    """sigma^2 = 2 (C_T + (r-d) K C_K + d C) / (K^2 C_KK), clamped to [SIGMA2_MIN, SIGMA2_MAX].

    Where the (spot-normalised) denominator ``K^2 C_KK / s0`` is at most
    ``CONVEXITY_EPS`` the result is the floor.  Inputs may be tape variables.
    """
    num = c_t + (r - d) * k * c_k + d * c
    den = k * k * c_kk
    ok = nx.value(den) / s0 > CONVEXITY_EPS
    raw = 2.0 * num / nx.where(ok, den, 1.0)
    rv = nx.value(raw)
    var = nx.where(ok, nx.clip(raw, SIGMA2_MIN, SIGMA2_MAX), SIGMA2_MIN)
    n_clamped = int(np.count_nonzero(~ok | (rv < SIGMA2_MIN) | (rv > SIGMA2_MAX)))
    return DupireResult(var, n_clamped)


def dupire_local_vol(surface, k, t, r: float, d: float) -> DupireResult:
    """Local variance at strikes ``k`` and maturities ``t`` read off ``surface``."""
    c, c_t, c_k, c_kk = surface.derivatives(k, t)
    s0 = getattr(surface, "s0", 1.0)
    res = dupire_variance(c, c_t, c_k, c_kk, np.asarray(k, dtype=np.float64), r, d, s0=s0)
    if res.n_clamped:
        logger.warning("Dupire: %d node(s) clamped", res.n_clamped)
    return res


@dataclass
class FunctionSurface:
    """Central differences of a price function ``fn(K, T)``."""

    fn: Callable
    dk: float
    dt: float
    s0: float = 1.0

    def derivatives(self, k, t):
        k = np.asarray(k, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        f = self.fn
        c = f(k, t)
        c_t = (f(k, t + self.dt) - f(k, t - self.dt)) / (2 * self.dt)
        up, dn = f(k + self.dk, t), f(k - self.dk, t)
        c_k = (up - dn) / (2 * self.dk)
        c_kk = (up - 2 * c + dn) / (self.dk * self.dk)
        return c, c_t, c_k, c_kk


@dataclass
class VolSurface:
    """Implied vols on a (maturity x strike) grid.

    Interpolation: monotone cubic (PCHIP) in strike per maturity, linear in
    total variance across maturities, flat outside the strike range.
    """

    strikes: np.ndarray
    maturities: np.ndarray
    implied_vols: np.ndarray  # shape (len(maturities), len(strikes))
    s0: float
    r: float = 0.0
    d: float = 0.0
    dk: float | None = None
    dt: float = 1e-3
    _splines: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.strikes = np.asarray(self.strikes, dtype=np.float64)
        self.maturities = np.asarray(self.maturities, dtype=np.float64)
        self.implied_vols = np.asarray(self.implied_vols, dtype=np.float64)
        for name, ax in (("strikes", self.strikes), ("maturities", self.maturities)):
            if ax.ndim != 1 or ax.size < 2 or np.any(np.diff(ax) <= 0):
                raise ArgumentError(f"{name} must be strictly increasing with at least 2 entries")
        if self.implied_vols.shape != (self.maturities.size, self.strikes.size):
            raise ArgumentError("implied_vols must have shape (n_maturities, n_strikes)")
        if not np.all(np.isfinite(self.implied_vols)):
            raise ArgumentError("implied vols must be finite")
        if self.dk is None:
            self.dk = 1e-3 * self.s0
        self._splines = [PchipInterpolator(self.strikes, row, extrapolate=False) for row in self.implied_vols]

    def implied_vol(self, k, t):
        k = np.clip(np.asarray(k, dtype=np.float64), self.strikes[0], self.strikes[-1])
        t = np.asarray(t, dtype=np.float64)
        k, t = np.broadcast_arrays(k, t)
        w_nodes = np.stack([sp(k) ** 2 * tm for sp, tm in zip(self._splines, self.maturities)])
        tc = np.clip(t, self.maturities[0], self.maturities[-1])
        j = np.clip(np.searchsorted(self.maturities, tc) - 1, 0, self.maturities.size - 2)
        t0, t1 = self.maturities[j], self.maturities[j + 1]
        lam = (tc - t0) / (t1 - t0)
        w0 = np.take_along_axis(w_nodes, j[None, ...], 0)[0]
        w1 = np.take_along_axis(w_nodes, (j + 1)[None, ...], 0)[0]
        w = (1 - lam) * w0 + lam * w1
        # outside the maturity range keep the nearest slice's vol
        tt = np.where((t < self.maturities[0]) | (t > self.maturities[-1]), tc, t)
        return np.sqrt(np.maximum(w / np.where(tc > 0, tc, 1.0), 0.0)) * np.ones_like(tt)

    def call_price(self, k, t):
        t = np.asarray(t, dtype=np.float64)
        return bs_price(self.s0, k, t, self.r, self.d, self.implied_vol(k, t), "C")

    def derivatives(self, k, t):
        return FunctionSurface(self.call_price, self.dk, self.dt, self.s0).derivatives(k, t)


@dataclass
class LocalVolTable:
    """Local variance tabulated on a (strike, maturity) grid; bilinear lookup, flat extrapolation."""

    spots: np.ndarray
    times: np.ndarray
    variance: np.ndarray  # shape (len(spots), len(times))

    def __post_init__(self):
        self.spots = np.asarray(self.spots, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        self._interp = RegularGridInterpolator((self.spots, self.times), self.variance)

    @classmethod
    def from_surface(cls, surface: VolSurface, spots, times) -> "LocalVolTable":
        kk, tt = np.meshgrid(spots, times, indexing="ij")
        res = dupire_local_vol(surface, kk, tt, surface.r, surface.d)
        return cls(spots, times, nx.value(res.variance))

    def __call__(self, s, t):
        s = np.clip(np.asarray(s, dtype=np.float64), self.spots[0], self.spots[-1])
        t = np.clip(np.asarray(t, dtype=np.float64), self.times[0], self.times[-1])
        s, t = np.broadcast_arrays(s, t)
        return self._interp(np.stack([s.ravel(), t.ravel()], axis=-1)).reshape(s.shape)


@dataclass
class NetworkSurface:
    """Call price ``C(K, T) = s0 * f(x, tau)`` for an MLP ``f``.

    Inputs are ``x = (K / s0 - k_center) * k_gain`` and
    ``tau = (T - t_center) / t_scale``; the defaults give ``(K / s0, T)``.
    """

    net: nx.Mlp
    params: object  # flat ndarray or Var
    s0: float
    t_scale: float = 1.0
    offset: int = 0
    k_center: float = 0.0
    k_gain: float = 1.0
    t_center: float = 0.0

    def derivatives(self, k, t):
        k_arr = nx.value(k)
        shape = np.broadcast_shapes(np.shape(k_arr), np.shape(t))
        x = _inputs(k, t, self.s0, self.t_scale, shape, self.k_center, self.k_gain, self.t_center)
        c, (c_x, c_tau), c_xx = nx.mlp_jet(self.net, self.params, x, first=(0, 1), second=0, offset=self.offset)
        c, c_x, c_tau, c_xx = (v.reshape(shape) for v in (c, c_x, c_tau, c_xx))
        g = self.k_gain
        return self.s0 * c, c_tau * (self.s0 / self.t_scale), c_x * g, c_xx * (g * g / self.s0)


def _inputs(k, t, s0, t_scale, shape, k_center=0.0, k_gain=1.0, t_center=0.0):
    kn = k * (k_gain / s0) - k_center * k_gain if (k_center or k_gain != 1.0) else k * (1.0 / s0)
    if not isinstance(kn, nx.Var):
        kn = np.broadcast_to(kn, shape)
    tn = np.broadcast_to((np.asarray(t, dtype=np.float64) - t_center) / t_scale, shape)
    if isinstance(kn, nx.Var) and kn.shape != shape:
        kn = kn + np.zeros(shape)
    return nx.stack([kn, tn], axis=-1).reshape(-1, 2)


# ---------------------------------------------------------------------------
# Neural call-surface fit


@dataclass
class NnlvConfig:
    hidden: tuple[int, ...] = (200, 200)
    epochs: int = 2000
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # "adam" | "lbfgs"
    seed: int = 0
    t_scale: float = 1.0
    window: int = 50
    k_center: float = 0.0
    k_gain: float = 1.0
    t_center: float = 0.0


@dataclass
class NnlvFit:
    net: nx.Mlp
    params: np.ndarray
    s0: float
    t_scale: float
    history: list[float]
    k_center: float = 0.0
    k_gain: float = 1.0
    t_center: float = 0.0

    def surface(self) -> NetworkSurface:
        return NetworkSurface(self.net, self.params, self.s0, self.t_scale, 0, self.k_center, self.k_gain,
                              self.t_center)


def nnlv_fit(targets, s0: float, config: NnlvConfig | None = None, init: np.ndarray | None = None) -> NnlvFit:
    """Fit ``f(x, tau) ~ C/s0`` (inputs as in :class:`NetworkSurface`) on the mean squared error.

    ``targets`` is a sequence of ``(K, T, C_market)``.  Adam stops early once
    the loss has not improved over the trailing ``window`` epochs.
    """
    cfg = config or NnlvConfig()
    tg = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    if tg.shape[0] == 0:
        raise ArgumentError("nnlv_fit needs at least one target")
    net = nx.Mlp.default(2, 1, cfg.hidden)
    theta = nx.init_params(net, cfg.seed).values if init is None else np.array(init, dtype=np.float64)
    x = np.asarray(_inputs(tg[:, 0], tg[:, 1], s0, cfg.t_scale, tg[:, 0].shape, cfg.k_center, cfg.k_gain,
                           cfg.t_center))
    affine = {"k_center": cfg.k_center, "k_gain": cfg.k_gain, "t_center": cfg.t_center}
    y = tg[:, 2] / s0

    def loss_and_grad(th):
        tape = nx.Tape()
        p = tape.variable(th)
        out = nx.mlp_forward(net, p, x)[:, 0]
        err = out - y
        loss = (err * err).mean()
        return float(loss.value), nx.grad(tape, loss, p)

    history: list[float] = []
    if cfg.epochs <= 0:
        return NnlvFit(net, theta, s0, cfg.t_scale, history, **affine)

    if cfg.optimizer == "lbfgs":
        last = {}

        def fun(th):
            val, g = loss_and_grad(th)
            if not np.isfinite(val):
                raise TrainingError("non-finite loss", len(history))
            last["x"], last["f"] = th.copy(), val
            return val, g

        def cb(th):
            # the accepted iterate is almost always the last evaluated point
            history.append(last["f"] if np.array_equal(th, last["x"]) else loss_and_grad(th)[0])

        res = minimize(fun, theta, jac=True, method="L-BFGS-B", callback=cb,
                       options={"maxiter": cfg.epochs, "maxcor": 50, "ftol": 0.0, "gtol": 0.0, "maxfun": 2 * cfg.epochs})
        return NnlvFit(net, res.x, s0, cfg.t_scale, history, **affine)

    if cfg.optimizer != "adam":
        raise ArgumentError(f"unknown optimizer {cfg.optimizer!r}")
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best = np.inf
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        val, g = loss_and_grad(theta)
        if not np.isfinite(val):
            raise TrainingError("non-finite loss", epoch)
        history.append(val)
        if val < best:
            best, best_epoch = val, epoch
        elif epoch - best_epoch >= cfg.window:
            break
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - cfg.learning_rate * (m / (1 - b1 ** epoch)) / (np.sqrt(v / (1 - b2 ** epoch)) + eps)
    return NnlvFit(net, theta, s0, cfg.t_scale, history, **affine)
