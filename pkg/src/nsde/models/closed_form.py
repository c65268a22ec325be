"""Black-Scholes closed forms: price, delta and implied volatility."""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from ..errors import ArgumentError, NoSolutionError


def _d1_d2(s0, k, t, r, d, sigma):
    vol = sigma * np.sqrt(t)
    d1 = (np.log(s0 / k) + (r - d + 0.5 * sigma * sigma) * t) / vol
    return d1, d1 - vol


def bs_price(s0, k, t, r, d, sigma, payoff: str = "C"):
    """European price under geometric Brownian motion; ``sigma = 0`` gives the discounted forward intrinsic."""
    s0, k, t, sigma = (np.asarray(v, dtype=np.float64) for v in (s0, k, t, sigma))
    if np.any(s0 <= 0) or np.any(k <= 0) or np.any(t <= 0):
        raise ArgumentError("s0, K and T must be positive")
    if np.any(sigma < 0):
        raise ArgumentError("sigma must be non-negative")
    fwd = s0 * np.exp(-d * t)
    disc_k = k * np.exp(-r * t)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1, d2 = _d1_d2(s0, k, t, r, d, np.where(sigma > 0, sigma, 1.0))
    call = np.where(sigma > 0, fwd * ndtr(d1) - disc_k * ndtr(d2), np.maximum(fwd - disc_k, 0.0))
    if payoff == "C":
        out = call
    elif payoff == "P":
        out = call - fwd + disc_k
    else:
        raise ArgumentError(f"payoff must be 'C' or 'P', got {payoff!r}")
    return out[()] if out.ndim == 0 else out


def bs_delta(s0, k, t, r, d, sigma, payoff: str = "C"):
    """dP/dS0; ``sigma = 0`` gives the step function of the forward moneyness."""
    s0, k, t, sigma = (np.asarray(v, dtype=np.float64) for v in (s0, k, t, sigma))
    with np.errstate(divide="ignore", invalid="ignore"):
        d1, _ = _d1_d2(s0, k, t, r, d, np.where(sigma > 0, sigma, 1.0))
    itm = s0 * np.exp(-d * t) > k * np.exp(-r * t)
    call = np.exp(-d * t) * np.where(sigma > 0, ndtr(d1), itm.astype(np.float64))
    out = call if payoff == "C" else call - np.exp(-d * t)
    return out[()] if np.ndim(out) == 0 else out


def price_bounds(s0, k, t, r, d, payoff: str) -> tuple[float, float]:
    fwd, disc_k = s0 * np.exp(-d * t), k * np.exp(-r * t)
    if payoff == "C":
        return max(fwd - disc_k, 0.0), fwd
    return max(disc_k - fwd, 0.0), disc_k


def bs_implied_vol(price: float, s0: float, k: float, t: float, r: float, d: float, payoff: str = "C",
                   sigma_max: float = 10.0) -> float:
    """Volatility reproducing ``price`` to within ``1e-10 * s0`` (bracketed root find)."""
    lo, hi = price_bounds(s0, k, t, r, d, payoff)
    tol = 1e-10 * s0
    if not (lo - tol <= price < hi):
        raise NoSolutionError(f"price {price} outside no-arbitrage bounds [{lo}, {hi})")
    if price <= lo + tol * 1e-3:
        return 0.0

    def f(sig):
        return float(bs_price(s0, k, t, r, d, sig, payoff)) - price

    if f(sigma_max) < 0:
        raise NoSolutionError(f"price {price} needs a volatility above {sigma_max}")
    sig = brentq(f, 1e-12, sigma_max, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(f(sig)) > tol:
        raise NoSolutionError(f"implied vol root find did not reach tolerance (residual {f(sig):.3e})")
    return sig
