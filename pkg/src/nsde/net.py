"""Reverse-mode automatic differentiation over numpy arrays, and MLP coefficient networks.

A :class:`Tape` records every operation applied to a :class:`Var`.  Values are
numpy arrays (0-d for scalars), so one node can stand for a whole batch of
paths or a whole PDE slice.  Functions in this module accept plain arrays as
well: when none of the inputs is a ``Var`` they return a plain ``ndarray`` and
nothing is recorded, which lets model code run unchanged with or without a
tape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ArgumentError, ContractViolation, InputShapeError

__all__ = [
    "Tape", "Var", "value", "custom_op", "grad",
    "exp", "log", "log1p", "sqrt", "softplus", "sigmoid", "tanh", "absolute",
    "maximum", "minimum", "clip", "where", "stack", "concatenate",
    "Mlp", "ParamLayout", "ParamVector", "init_params", "mlp_forward", "mlp_jet",
    "save_params", "load_params",
]


class Tape:
    """Append-only record of operations; node ``k`` only refers to parents ``< k``."""

    def __init__(self) -> None:
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._shapes: list[tuple[int, ...]] = []

    def __len__(self) -> int:
        return len(self._parents)

    def variable(self, val) -> "Var":
        """Register a leaf (typically a parameter vector)."""
        arr = np.array(val, dtype=np.float64)
        return self._push(arr, (), None)

    def _push(self, val: np.ndarray, parents: tuple[int, ...], vjp) -> "Var":
        idx = len(self._parents)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._shapes.append(val.shape)
        return Var(self, idx, val)

    def backward(self, output: "Var") -> list[np.ndarray | None]:
        """One reverse sweep from a scalar ``output``; returns the adjoint of every node.

        Nodes that do not influence ``output`` get ``None``.
        """
        if output.tape is not self:
            raise ContractViolation("output belongs to a different tape")
        if output.value.size != 1:
            raise ContractViolation(f"backward needs a scalar output, got shape {output.value.shape}")
        adj: list[np.ndarray | None] = [None] * (output.index + 1)
        adj[output.index] = np.ones(self._shapes[output.index])
        for k in range(output.index, -1, -1):
            g = adj[k]
            if g is None or not self._parents[k]:
                continue
            grads = self._vjps[k](g)
            for p, gp in zip(self._parents[k], grads):
                if gp is None:
                    continue
                gp = _unbroadcast(np.asarray(gp, dtype=np.float64), self._shapes[p])
                adj[p] = gp if adj[p] is None else adj[p] + gp
        return adj


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Var:
    """An array-valued node on a tape."""

    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, tape: Tape, index: int, val: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = val

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __len__(self):
        return len(self.value)

    def __float__(self):
        return float(self.value)

    def __add__(self, o):
        return _add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return _add(self, _neg(o))

    def __rsub__(self, o):
        return _add(o, _neg(self))

    def __mul__(self, o):
        return _mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return _div(self, o)

    def __rtruediv__(self, o):
        return _div(o, self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, p):
        if isinstance(p, Var):
            raise ArgumentError("only constant exponents are supported")
        x = self.value
        return _record(x ** p, [self], [lambda g: g * p * x ** (p - 1)])

    def __matmul__(self, o):
        return _matmul(self, o)

    def __rmatmul__(self, o):
        return _matmul(o, self)

    def __getitem__(self, idx):
        x = self.value
        out = x[idx]
        advanced = _is_advanced(idx)

        def vjp(g):
            full = np.zeros(x.shape)
            if advanced:
                np.add.at(full, idx, g)
            else:
                full[idx] += g
            return full

        return _record(out, [self], [vjp])

    def reshape(self, *shape):
        x = self.value
        return _record(x.reshape(*shape), [self], [lambda g: g.reshape(x.shape)])

    @property
    def T(self):
        return _record(self.value.T, [self], [lambda g: g.T])

    def sum(self, axis=None, keepdims=False):
        x = self.value

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, x.shape)

        return _record(x.sum(axis=axis, keepdims=keepdims), [self], [vjp])

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod([self.value.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def value(x):
    """Strip the tape: ``Var`` -> its array, anything else -> ``np.asarray``."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _record(out, inputs: Sequence, vjps: Sequence[Callable]):
    tape = None
    parents, fns = [], []
    for x, fn in zip(inputs, vjps):
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractViolation("operands recorded on different tapes")
            parents.append(x.index)
            fns.append(fn)
    out = np.asarray(out, dtype=np.float64)
    if tape is None:
        return out
    return tape._push(out, tuple(parents), lambda g: [f(g) for f in fns])


def custom_op(out, inputs: Sequence, vjp: Callable[[np.ndarray], Sequence]):
    """Record a fused operation with a hand-written vector-Jacobian product.

    ``vjp(g)`` must return one gradient (or ``None``) per entry of ``inputs``.
    """
    tape = None
    parents, pos = [], []
    for k, x in enumerate(inputs):
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractViolation("operands recorded on different tapes")
            parents.append(x.index)
            pos.append(k)
    out = np.asarray(out, dtype=np.float64)
    if tape is None:
        return out

    def fn(g):
        gs = vjp(g)
        return [gs[k] for k in pos]

    return tape._push(out, tuple(parents), fn)


def _add(a, b):
    return _record(value(a) + value(b), [a, b], [lambda g: g, lambda g: g])


def _neg(a):
    return _record(-value(a), [a], [lambda g: -g])


def _mul(a, b):
    va, vb = value(a), value(b)
    return _record(va * vb, [a, b], [lambda g: g * vb, lambda g: g * va])


def _div(a, b):
    va, vb = value(a), value(b)
    out = va / vb
    return _record(out, [a, b], [lambda g: g / vb, lambda g: -g * out / vb])


def _matmul(a, b):
    va, vb = value(a), value(b)
    if va.ndim > 2 or vb.ndim > 2:
        raise InputShapeError("matmul supports operands of rank <= 2")
    out = va @ vb
    a2 = va if va.ndim == 2 else va[None, :]
    b2 = vb if vb.ndim == 2 else vb[:, None]

    def ga(g):
        g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(va.shape)

    def gb(g):
        g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[1])
        return (a2.T @ g2).reshape(vb.shape)

    return _record(out, [a, b], [ga, gb])


def exp(x):
    out = np.exp(value(x))
    return _record(out, [x], [lambda g: g * out])


def log(x):
    v = value(x)
    return _record(np.log(v), [x], [lambda g: g / v])


def log1p(x):
    v = value(x)
    return _record(np.log1p(v), [x], [lambda g: g / (1.0 + v)])


def sqrt(x):
    out = np.sqrt(value(x))
    return _record(out, [x], [lambda g: g * 0.5 / out])


def softplus(x):
    """ln(1 + e^x) with beta = 1, written as max(x, 0) + log1p(e^-|x|) to stay finite for large |x|."""
    v = value(x)
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _record(out, [x], [lambda g: g * expit(v)])


def sigmoid(x):
    out = expit(value(x))
    return _record(out, [x], [lambda g: g * out * (1.0 - out)])


def tanh(x):
    out = np.tanh(value(x))
    return _record(out, [x], [lambda g: g * (1.0 - out * out)])


def absolute(x):
    v = value(x)
    return _record(np.abs(v), [x], [lambda g: g * np.sign(v)])


def maximum(a, b):
    """Elementwise max; on ties the whole adjoint goes to ``a``."""
    va, vb = value(a), value(b)
    take_a = va >= vb
    return _record(np.where(take_a, va, vb), [a, b], [lambda g: g * take_a, lambda g: g * ~take_a])


def minimum(a, b):
    va, vb = value(a), value(b)
    take_a = va <= vb
    return _record(np.where(take_a, va, vb), [a, b], [lambda g: g * take_a, lambda g: g * ~take_a])


def clip(x, lo, hi):
    v = value(x)
    inside = (v >= lo) & (v <= hi)
    return _record(np.clip(v, lo, hi), [x], [lambda g: g * inside])


def where(cond, a, b):
    c = np.asarray(cond, dtype=bool)
    return _record(np.where(c, value(a), value(b)), [a, b], [lambda g: g * c, lambda g: g * ~c])


def stack(xs: Sequence, axis: int = 0):
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    fns = [(lambda k: (lambda g: np.take(g, k, axis=axis)))(k) for k in range(len(vals))]
    return _record(out, list(xs), fns)


def concatenate(xs: Sequence, axis: int = 0):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def piece(k):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[k], bounds[k + 1])
        return lambda g: g[tuple(sl)]

    return _record(out, list(xs), [piece(k) for k in range(len(vals))])


def grad(tape: Tape, output: Var, wrt: Var | Sequence[Var]):
    """Gradient of the scalar ``output`` with respect to leaf ``wrt`` (or a list of leaves)."""
    adj = tape.backward(output)

    def one(v: Var):
        a = adj[v.index] if v.index < len(adj) else None
        return np.zeros(v.shape) if a is None else a

    if isinstance(wrt, Var):
        return one(wrt)
    return [one(v) for v in wrt]


# ---------------------------------------------------------------------------
# Parameters and networks


@dataclass(frozen=True)
class ParamLayout:
    """Ordered map from block name to ``(start, stop, shape)`` inside a flat vector."""

    entries: tuple[tuple[str, int, int, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return self.entries[-1][2] if self.entries else 0

    def __getitem__(self, name: str) -> tuple[int, int, tuple[int, ...]]:
        for n, a, b, shape in self.entries:
            if n == name:
                return a, b, shape
        raise KeyError(name)

    def names(self) -> list[str]:
        return [e[0] for e in self.entries]

    @classmethod
    def build(cls, blocks: Iterable[tuple[str, tuple[int, ...]]]) -> "ParamLayout":
        entries, pos = [], 0
        for name, shape in blocks:
            n = int(np.prod(shape)) if shape else 1
            entries.append((name, pos, pos + n, tuple(shape)))
            pos += n
        return cls(tuple(entries))

    def concat(self, other: "ParamLayout") -> "ParamLayout":
        off = self.size
        moved = tuple((n, a + off, b + off, s) for n, a, b, s in other.entries)
        return ParamLayout(self.entries + moved)

    def unflatten(self, v) -> dict[str, np.ndarray]:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.size,):
            raise InputShapeError(f"expected a flat vector of length {self.size}, got {v.shape}")
        return {n: v[a:b].reshape(s).copy() for n, a, b, s in self.entries}

    def flatten(self, blocks: dict[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.size)
        for n, a, b, s in self.entries:
            out[a:b] = np.asarray(blocks[n], dtype=np.float64).reshape(-1)
        return out


@dataclass
class ParamVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise InputShapeError("values do not match the layout size")


@dataclass(frozen=True)
class Mlp:
    """Fully connected net: softplus on hidden layers, identity on the output."""

    layer_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ArgumentError(f"invalid layer dims {self.layer_dims}")
        object.__setattr__(self, "layer_dims", dims)

    @classmethod
    def default(cls, n_in: int, n_out: int, hidden: Sequence[int] = (200, 200)) -> "Mlp":
        return cls((n_in, *hidden, n_out))

    @property
    def n_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_out(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        d = self.layer_dims
        return sum((d[i] + 1) * d[i + 1] for i in range(len(d) - 1))

    def layout(self, prefix: str = "net") -> ParamLayout:
        blocks = []
        d = self.layer_dims
        for i in range(len(d) - 1):
            blocks.append((f"{prefix}/{i}/weight", (d[i], d[i + 1])))
            blocks.append((f"{prefix}/{i}/bias", (d[i + 1],)))
        return ParamLayout.build(blocks)

    def _layers(self, params, offset: int):
        d = self.layer_dims
        pos = offset
        for i in range(len(d) - 1):
            nw = d[i] * d[i + 1]
            w = params[pos:pos + nw].reshape(d[i], d[i + 1])
            b = params[pos + nw:pos + nw + d[i + 1]]
            pos += nw + d[i + 1]
            yield w, b


def init_params(net: Mlp, seed: int, prefix: str = "net") -> ParamVector:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    layout = net.layout(prefix)
    blocks = {}
    d = net.layer_dims
    for i in range(len(d) - 1):
        lim = np.sqrt(6.0 / (d[i] + d[i + 1]))
        blocks[f"{prefix}/{i}/weight"] = rng.uniform(-lim, lim, size=(d[i], d[i + 1]))
        blocks[f"{prefix}/{i}/bias"] = np.zeros(d[i + 1])
    return ParamVector(layout.flatten(blocks), layout)


def _check_input(net: Mlp, x):
    shape = value(x).shape
    if not shape or shape[-1] != net.n_in:
        raise InputShapeError(f"network expects {net.n_in} inputs, got shape {shape}")


def mlp_forward(net: Mlp, params, x, offset: int = 0):
    """Evaluate the network on ``x`` of shape ``(n_in,)`` or ``(batch, n_in)``."""
    _check_input(net, x)
    layers = list(net._layers(params, offset))
    h = x
    for k, (w, b) in enumerate(layers):
        z = h @ w + b
        h = softplus(z) if k < len(layers) - 1 else z
    return h


def mlp_jet(net: Mlp, params, x, first: Sequence[int], second: int, offset: int = 0):
    """Network output together with input derivatives, by forward tangent propagation.

    Returns ``(y, [dy/dx_a for a in first], d2y/dx_second^2)``.  Every
    quantity is built from ordinary tape operations, so gradients with respect
    to ``params`` flow through the derivatives as well.
    """
    _check_input(net, x)
    xv = value(x)
    h = x
    dh = []
    for a in first:
        e = np.zeros(xv.shape)
        e[..., a] = 1.0
        dh.append(e)
    e2 = np.zeros(xv.shape)
    e2[..., second] = 1.0
    d1 = e2  # tangent along the second-order direction
    d2 = np.zeros(xv.shape)
    layers = list(net._layers(params, offset))
    for k, (w, b) in enumerate(layers):
        z = h @ w + b
        dz = [t @ w for t in dh]
        d1z = d1 @ w
        d2z = d2 @ w
        if k == len(layers) - 1:
            return z, dz, d2z
        s = sigmoid(z)
        h = softplus(z)
        dh = [s * t for t in dz]
        d2 = s * (1.0 - s) * d1z * d1z + s * d2z
        d1 = s * d1z
    raise AssertionError("unreachable")  # pragma: no cover


# ---------------------------------------------------------------------------
# Checkpoints

PARAMS_FORMAT = "nsde.params/1"


def params_to_json(pv: ParamVector) -> dict:
    """JSON-able dict; floats are written with ``repr`` so they round-trip exactly."""
    return {
        "format": PARAMS_FORMAT,
        "layout": [{"name": n, "start": a, "stop": b, "shape": list(s)} for n, a, b, s in pv.layout.entries],
        "values": [repr(float(v)) for v in pv.values],
    }


def params_from_json(obj: dict) -> ParamVector:
    if obj.get("format") != PARAMS_FORMAT:
        raise ArgumentError(f"unsupported parameter format {obj.get('format')!r}")
    layout = ParamLayout(tuple((e["name"], int(e["start"]), int(e["stop"]), tuple(e["shape"])) for e in obj["layout"]))
    return ParamVector(np.array([float(v) for v in obj["values"]]), layout)


def save_params(path: str | Path, pv: ParamVector) -> None:
    Path(path).write_text(json.dumps(params_to_json(pv), indent=1) + "\n", encoding="utf-8")


def load_params(path: str | Path) -> ParamVector:
    return params_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
