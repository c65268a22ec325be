"""Counter-based normal draws keyed by (seed, step, component, path).

Each draw is one 64-bit Philox output mapped through the inverse normal CDF,
so the value for a given key never depends on how many paths are simulated
or in which chunks.  Path ``p`` sits in Philox block ``p // 4``, word
``p % 4`` of the stream whose high counter words hold ``(step, component)``.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class DrawKey:
    seed: int
    step: int
    component: int
    path_start: int
    path_stop: int


@dataclass
class KeyAudit:
    """Log of every key range consumed while the audit is active."""

    keys: list[DrawKey] = field(default_factory=list)

    def paths(self, seed: int | None = None) -> set[int]:
        out: set[int] = set()
        for k in self.keys:
            if seed is None or k.seed == seed:
                out.update(range(k.path_start, k.path_stop))
        return out

    def path_ranges(self) -> set[tuple[int, int, int]]:
        return {(k.seed, k.path_start, k.path_stop) for k in self.keys}


_AUDIT: contextvars.ContextVar[KeyAudit | None] = contextvars.ContextVar("nsde_rng_audit", default=None)


@contextlib.contextmanager
def audit_keys():
    """Record every ``normals`` call made inside the ``with`` block."""
    log = KeyAudit()
    token = _AUDIT.set(log)
    try:
        yield log
    finally:
        _AUDIT.reset(token)


def normals(seed: int, step: int, component: int, path_start: int, count: int) -> np.ndarray:
    """Standard normal draws for paths ``[path_start, path_start + count)``."""
    log = _AUDIT.get()
    if log is not None:
        log.keys.append(DrawKey(seed, step, component, path_start, path_start + count))
    if count <= 0:
        return np.empty(0)
    block, skip = divmod(path_start, 4)
    bg = Philox(key=[seed & _MASK64, (seed >> 64) & _MASK64], counter=[block, 0, step, component])
    raw = bg.random_raw(count + skip)[skip:]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(u)
