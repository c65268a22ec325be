"""SDE model zoo.

Every model exposes ``coeffs(s, y, t, theta)`` returning the drift and
diffusion of the price ``S`` and of the second state ``Y`` together with the
driver correlation.  ``theta`` defaults to the model's own parameters; passing
a tape variable instead makes every coefficient differentiable.  One-dimensional
models return exact zeros for the ``Y`` coefficients.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .. import net as nx
from ..errors import ArgumentError, NumericError
from .dupire import LocalVolTable, NetworkSurface, VolSurface, dupire_variance


class Coeffs(NamedTuple):
    mu_s: object
    sigma_s: object
    mu_y: object
    sigma_y: object
    rho: object


def _softplus_inv(x: float) -> float:
    if x <= 0:
        raise ArgumentError(f"softplus-parametrised value must be positive, got {x}")
    return float(x + np.log(-np.expm1(-x)))


def sqrt_pos(y):
    """sqrt(max(y, 0)) with derivative 0 wherever y <= 0."""
    v = nx.value(y)
    pos = v > 0
    out = np.sqrt(np.where(pos, v, 0.0))
    safe = np.where(pos, out, 1.0)
    return nx.custom_op(out, [y], lambda g: [np.where(pos, 0.5 * g / safe, 0.0)])


def _check_finite(arrays, s, y, t, who: str):
    for a in arrays:
        v = nx.value(a)
        bad = ~np.isfinite(v)
        if np.any(bad):
            idx = np.unravel_index(np.flatnonzero(bad)[0], v.shape) if v.ndim else ()
            sv = np.broadcast_to(nx.value(s), v.shape)[idx] if v.ndim else float(nx.value(s))
            yv = np.broadcast_to(nx.value(y), v.shape)[idx] if v.ndim else float(nx.value(y))
            raise NumericError(f"{who}: non-finite network output", (float(sv), float(yv), float(t)))


def _net_inputs(cols, shape):
    full = []
    for c in cols:
        if isinstance(c, nx.Var):
            full.append(c if c.shape == shape else c + np.zeros(shape))
        else:
            full.append(np.broadcast_to(np.asarray(c, dtype=np.float64), shape))
    return nx.stack(full, axis=-1).reshape(-1, len(cols))


class SdeModel:
    """Common plumbing: flat parameter vector, rates and the reference spot."""

    kind = ""
    dim = 1
    time_homogeneous = False

    def __init__(self, params, rate: float = 0.0, dividend: float = 0.0, spot: float = 1.0):
        self.params = np.array(params, dtype=np.float64).reshape(-1)
        self.rate = float(rate)
        self.dividend = float(dividend)
        self.spot = float(spot)
        if self.params.shape != (self.layout().size,):
            raise ArgumentError(f"{self.kind}: expected {self.layout().size} parameters, got {self.params.size}")

    # -- structure -----------------------------------------------------
    def layout(self) -> nx.ParamLayout:
        return nx.ParamLayout(())

    def param_vector(self) -> nx.ParamVector:
        return nx.ParamVector(self.params.copy(), self.layout())

    def with_params(self, theta) -> "SdeModel":
        out = copy.copy(self)
        out.params = np.array(theta, dtype=np.float64).reshape(-1)
        return out

    def with_market(self, rate: float, dividend: float, spot: float | None = None) -> "SdeModel":
        out = copy.copy(self)
        out.rate, out.dividend = float(rate), float(dividend)
        if spot is not None:
            out.spot = float(spot)
        return out

    def hyper(self) -> dict:
        return {}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"kind": self.kind, "hyper": self.hyper()}, sort_keys=True).encode())
        h.update(self.params.tobytes())
        return h.hexdigest()[:16]

    # -- dynamics ------------------------------------------------------
    def _theta(self, theta):
        return self.params if theta is None else theta

    def initial_y(self, theta=None):
        return 0.0

    def correlation(self, theta=None):
        return 0.0

    def coeffs(self, s, y, t: float, theta=None) -> Coeffs:
        raise NotImplementedError

    def _flat(self, s):
        z = np.zeros(np.shape(nx.value(s)))
        return z, z

    def feller(self) -> bool | None:
        return None


class BlackScholes(SdeModel):
    kind = "bs"
    time_homogeneous = True

    def __init__(self, sigma: float = 0.2, rate: float = 0.0, dividend: float = 0.0, spot: float = 1.0, params=None):
        super().__init__([sigma] if params is None else params, rate, dividend, spot)

    def layout(self):
        return nx.ParamLayout.build([("bs/sigma", (1,))])

    @property
    def sigma(self) -> float:
        return abs(float(self.params[0]))

    def coeffs(self, s, y, t, theta=None):
        sig = nx.absolute(self._theta(theta)[0])
        zy, sy = self._flat(s)
        return Coeffs((self.rate - self.dividend) * s, sig * s, zy, sy, 0.0)


class DupireLV(SdeModel):
    """Classic local volatility: Dupire's formula on an interpolated implied-vol surface."""

    kind = "dupire"

    def __init__(self, surface: VolSurface, n_spots: int = 120, n_times: int = 40, rate: float | None = None,
                 dividend: float | None = None, spot: float | None = None, params=None):
        self.surface = surface
        self.n_spots, self.n_times = int(n_spots), int(n_times)
        spots = np.linspace(surface.strikes[0], surface.strikes[-1], self.n_spots)
        times = np.linspace(surface.maturities[0], surface.maturities[-1], self.n_times)
        self.table = LocalVolTable.from_surface(surface, spots, times)
        super().__init__([], surface.r if rate is None else rate, surface.d if dividend is None else dividend,
                         surface.s0 if spot is None else spot)

    def hyper(self):
        sf = self.surface
        return {"strikes": [repr(float(v)) for v in sf.strikes],
                "maturities": [repr(float(v)) for v in sf.maturities],
                "implied_vols": [[repr(float(v)) for v in row] for row in sf.implied_vols],
                "s0": sf.s0, "r": sf.r, "d": sf.d, "n_spots": self.n_spots, "n_times": self.n_times}

    def coeffs(self, s, y, t, theta=None):
        var = self.table(nx.value(s), t)
        zy, sy = self._flat(s)
        return Coeffs((self.rate - self.dividend) * s, np.sqrt(var) * s, zy, sy, 0.0)


class NeuralLocalVol(SdeModel):
    """Local volatility from Dupire's formula applied to a call-price network ``C(K, T)``.

    The network sees ``((K / spot - k_center) * k_gain, (T - t_center) / t_scale)``
    and returns ``C / spot``.
    ``nnlv`` and ``sdenn`` share this structure and differ only in how they are
    calibrated (surface fit versus optimisation through the SDE).
    """

    kind = "sdenn"

    def __init__(self, hidden=(200, 200), t_scale: float = 1.0, rate: float = 0.0, dividend: float = 0.0,
                 spot: float = 1.0, params=None, seed: int = 0, k_center: float = 0.0, k_gain: float = 1.0,
                 t_center: float = 0.0):
        self.hidden = tuple(int(h) for h in hidden)
        self.t_scale = float(t_scale)
        self.k_center, self.k_gain, self.t_center = float(k_center), float(k_gain), float(t_center)
        self.c_net = nx.Mlp.default(2, 1, self.hidden)
        if params is None:
            params = self._init(seed)
        super().__init__(params, rate, dividend, spot)

    def _init(self, seed):
        return nx.init_params(self.c_net, seed, "c").values

    def layout(self):
        return self.c_net.layout("c")

    def hyper(self):
        out = {"hidden": list(self.hidden), "t_scale": self.t_scale}
        if (self.k_center, self.k_gain, self.t_center) != (0.0, 1.0, 0.0):
            out.update(k_center=self.k_center, k_gain=self.k_gain, t_center=self.t_center)
        return out

    def local_variance(self, s, t, theta=None):
        th = self._theta(theta)
        surf = NetworkSurface(self.c_net, th, self.spot, self.t_scale, 0, self.k_center, self.k_gain, self.t_center)
        c, c_t, c_k, c_kk = surf.derivatives(s, t)
        _check_finite([c, c_t, c_k, c_kk], s, 0.0, t, self.kind)
        return dupire_variance(c, c_t, c_k, c_kk, s, self.rate, self.dividend, s0=self.spot).variance

    def _drift(self, s, t, th):
        return (self.rate - self.dividend) * s

    def coeffs(self, s, y, t, theta=None):
        th = self._theta(theta)
        sig = sqrt_pos(self.local_variance(s, t, th))
        zy, sy = self._flat(s)
        return Coeffs(self._drift(s, t, th), sig * s, zy, sy, 0.0)


class NNLV(NeuralLocalVol):
    kind = "nnlv"


class SDENN(NeuralLocalVol):
    kind = "sdenn"


class SDENNDrift(NeuralLocalVol):
    """SDENN with a second network for the proportional drift ``mu(S/spot, t/t_scale)``."""

    kind = "sdenn_drift"

    def __init__(self, hidden=(200, 200), **kwargs):
        self.mu_net = nx.Mlp.default(2, 1, tuple(hidden))
        super().__init__(hidden, **kwargs)

    def _init(self, seed):
        mu = nx.init_params(self.mu_net, seed + 1, "mu").values
        mu[-1] = 0.0
        return np.concatenate([nx.init_params(self.c_net, seed, "c").values, mu])

    def layout(self):
        return self.c_net.layout("c").concat(self.mu_net.layout("mu"))

    def _drift(self, s, t, th):
        shape = np.shape(nx.value(s))
        x = _net_inputs([s * (1.0 / self.spot), np.full(shape, t / self.t_scale)], shape)
        mu = nx.mlp_forward(self.mu_net, th, x, offset=self.c_net.n_params)[:, 0].reshape(shape)
        _check_finite([mu], s, 0.0, t, self.kind)
        return mu * s


class Heston(SdeModel):
    """Heston dynamics with full truncation; positive parameters via softplus, rho via tanh.

    Raw parameter order: (Y0, alpha, m, k, rho).
    """

    kind = "heston"
    dim = 2
    time_homogeneous = True

    def __init__(self, y0: float = 0.04, alpha: float = 1.5, m: float = 0.04, k: float = 0.3, rho: float = -0.5,
                 rate: float = 0.0, dividend: float = 0.0, spot: float = 1.0, params=None):
        if params is None:
            if not -1.0 < rho < 1.0:
                raise ArgumentError("rho must lie in (-1, 1)")
            params = [_softplus_inv(y0), _softplus_inv(alpha), _softplus_inv(m), _softplus_inv(k), np.arctanh(rho)]
        super().__init__(params, rate, dividend, spot)

    def layout(self):
        return nx.ParamLayout.build([("heston/raw", (5,))])

    def _offset(self) -> int:
        return 0

    def values(self, theta=None) -> dict:
        th = self._theta(theta)
        o = self._offset()
        return {"y0": nx.softplus(th[o]), "alpha": nx.softplus(th[o + 1]), "m": nx.softplus(th[o + 2]),
                "k": nx.softplus(th[o + 3]), "rho": nx.tanh(th[o + 4])}

    def initial_y(self, theta=None):
        return self.values(theta)["y0"]

    def correlation(self, theta=None):
        return self.values(theta)["rho"]

    def feller(self) -> bool:
        v = {k: float(nx.value(x)) for k, x in self.values().items()}
        return 2.0 * v["alpha"] * v["m"] > v["k"] ** 2

    def _y_coeffs(self, y, p):
        return p["alpha"] * (p["m"] - y), p["k"] * sqrt_pos(y)

    def coeffs(self, s, y, t, theta=None):
        p = self.values(theta)
        mu_y, sig_y = self._y_coeffs(y, p)
        return Coeffs((self.rate - self.dividend) * s, sqrt_pos(y) * s, mu_y, sig_y, p["rho"])


class TwoDNN(SdeModel):
    """Two-dimensional neural SDE: one network ``f`` with four outputs.

    mu_S = scale*f1, sigma_S = scale*softplus(f2), mu_Y = f3, sigma_Y = softplus(f4),
    evaluated on ``(S/spot, Y, t/t_scale)``.  The parameter vector ends with
    ``(atanh-rho, Y0)``.
    """

    kind = "2dnn"
    dim = 2

    def __init__(self, hidden=(200, 200), t_scale: float = 1.0, price_scale: float = 1.0, rho: float = 0.0,
                 y0: float = 0.0, rate: float = 0.0, dividend: float = 0.0, spot: float = 1.0, params=None,
                 seed: int = 0):
        self.hidden = tuple(int(h) for h in hidden)
        self.t_scale = float(t_scale)
        self.price_scale = float(price_scale)
        self.net = nx.Mlp.default(3, 4, self.hidden)
        if params is None:
            params = np.concatenate([nx.init_params(self.net, seed, "f").values, [np.arctanh(rho), y0]])
        super().__init__(params, rate, dividend, spot)

    def layout(self):
        return self.net.layout("f").concat(nx.ParamLayout.build([("rho", (1,)), ("y0", (1,))]))

    def hyper(self):
        return {"hidden": list(self.hidden), "t_scale": self.t_scale, "price_scale": self.price_scale}

    def initial_y(self, theta=None):
        return self._theta(theta)[self.net.n_params + 1]

    def correlation(self, theta=None):
        return nx.tanh(self._theta(theta)[self.net.n_params])

    def _eval(self, s, y, t, th):
        shape = np.broadcast_shapes(np.shape(nx.value(s)), np.shape(nx.value(y)))
        x = _net_inputs([s * (1.0 / self.spot), y, np.full(shape, t / self.t_scale)], shape)
        out = nx.mlp_forward(self.net, th, x)
        _check_finite([out], s, y, t, self.kind)
        return [out[:, j].reshape(shape) for j in range(out.shape[1])]

    def coeffs(self, s, y, t, theta=None):
        th = self._theta(theta)
        f1, f2, f3, f4 = self._eval(s, y, t, th)
        sc = self.price_scale
        return Coeffs(sc * f1, sc * nx.softplus(f2), f3, nx.softplus(f4), self.correlation(th))


class TwoDNNHeston(Heston):
    """Price dynamics from a network ``g`` with two outputs, Heston variance for ``Y``.

    mu_S = g1 * S, sigma_S = softplus(g2) * S on inputs ``(S/spot, Y, t/t_scale)``.
    """

    kind = "2dnn_heston"
    time_homogeneous = False

    def __init__(self, hidden=(200, 200), t_scale: float = 1.0, y0: float = 0.04, alpha: float = 1.5,
                 m: float = 0.04, k: float = 0.3, rho: float = -0.5, rate: float = 0.0, dividend: float = 0.0,
                 spot: float = 1.0, params=None, seed: int = 0):
        self.hidden = tuple(int(h) for h in hidden)
        self.t_scale = float(t_scale)
        self.net = nx.Mlp.default(3, 2, self.hidden)
        if params is None:
            hest = Heston(y0, alpha, m, k, rho).params
            params = np.concatenate([nx.init_params(self.net, seed, "g").values, hest])
        super().__init__(rate=rate, dividend=dividend, spot=spot, params=params)

    def layout(self):
        return self.net.layout("g").concat(nx.ParamLayout.build([("heston/raw", (5,))]))

    def _offset(self):
        return self.net.n_params

    def hyper(self):
        return {"hidden": list(self.hidden), "t_scale": self.t_scale}

    def coeffs(self, s, y, t, theta=None):
        th = self._theta(theta)
        p = self.values(th)
        shape = np.broadcast_shapes(np.shape(nx.value(s)), np.shape(nx.value(y)))
        x = _net_inputs([s * (1.0 / self.spot), y, np.full(shape, t / self.t_scale)], shape)
        out = nx.mlp_forward(self.net, th, x)
        _check_finite([out], s, y, t, self.kind)
        g1, g2 = out[:, 0].reshape(shape), out[:, 1].reshape(shape)
        mu_y, sig_y = self._y_coeffs(y, p)
        return Coeffs(g1 * s, nx.softplus(g2) * s, mu_y, sig_y, p["rho"])


class CustomSde(SdeModel):
    """Model from a user callable ``fn(s, y, t, theta) -> Coeffs``; not serialisable."""

    kind = "custom"

    def __init__(self, fn: Callable, params, dim: int = 1, y0: float = 0.0, rate: float = 0.0,
                 dividend: float = 0.0, spot: float = 1.0, time_homogeneous: bool = False):
        self.fn = fn
        self.dim = dim
        self.y0 = y0
        self.time_homogeneous = time_homogeneous
        self._n = int(np.size(params))
        super().__init__(params, rate, dividend, spot)

    def layout(self):
        return nx.ParamLayout.build([("custom", (self._n,))]) if self._n else nx.ParamLayout(())

    def initial_y(self, theta=None):
        return self.y0

    def correlation(self, theta=None):
        return self.coeffs(np.ones(1), np.zeros(1), 0.0, theta).rho

    def coeffs(self, s, y, t, theta=None):
        return Coeffs(*self.fn(s, y, t, self._theta(theta)))


# ---------------------------------------------------------------------------
# Checkpoints

MODEL_FORMAT = "nsde.model/1"

_KINDS = {cls.kind: cls for cls in (BlackScholes, DupireLV, NNLV, SDENN, SDENNDrift, Heston, TwoDNN, TwoDNNHeston)}


def model_kinds() -> list[str]:
    return sorted(_KINDS)


def model_to_json(model: SdeModel) -> dict:
    if model.kind not in _KINDS:
        raise ArgumentError(f"model kind {model.kind!r} cannot be serialised")
    rho = model.correlation()
    return {
        "format": MODEL_FORMAT,
        "kind": model.kind,
        "hyper": model.hyper(),
        "rate": repr(model.rate),
        "dividend": repr(model.dividend),
        "spot": repr(model.spot),
        "rho": repr(float(nx.value(rho))),
        "y0": repr(float(nx.value(model.initial_y()))),
        "params": nx.params_to_json(model.param_vector()),
    }


def model_from_json(obj: dict) -> SdeModel:
    if obj.get("format") != MODEL_FORMAT:
        raise ArgumentError(f"unsupported model format {obj.get('format')!r}")
    kind = obj["kind"]
    if kind not in _KINDS:
        raise ArgumentError(f"unknown model kind {kind!r}")
    cls = _KINDS[kind]
    pv = nx.params_from_json(obj["params"])
    common = {"rate": float(obj["rate"]), "dividend": float(obj["dividend"]), "spot": float(obj["spot"]),
              "params": pv.values}
    hyper = dict(obj.get("hyper", {}))
    if cls is DupireLV:
        surface = VolSurface(
            [float(v) for v in hyper["strikes"]], [float(v) for v in hyper["maturities"]],
            [[float(v) for v in row] for row in hyper["implied_vols"]], hyper["s0"], hyper["r"], hyper["d"],
        )
        return DupireLV(surface, hyper["n_spots"], hyper["n_times"], **common)
    if "hidden" in hyper:
        hyper["hidden"] = tuple(hyper["hidden"])
    model = cls(**hyper, **common)
    if model.layout() != pv.layout:
        raise ArgumentError("checkpoint layout does not match the model structure")
    return model


def save_model(path: str | Path, model: SdeModel) -> None:
    Path(path).write_text(json.dumps(model_to_json(model), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> SdeModel:
    return model_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
