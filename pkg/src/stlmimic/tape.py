"""Reverse-mode automatic differentiation over scalar expression graphs.

A `Value` records its payload plus parent references and the exact local
partials computed at forward time; `backward` runs one reverse topological
sweep (creation order is topological by construction). Every op accepts
plain numbers alongside `Value`s and degrades to ordinary float arithmetic
when no `Value` is involved, so the same model code serves both
differentiable and value-only evaluation.

Graphs are single-owner while being built and swept; independent graphs
may live on different threads.
"""

from __future__ import annotations

import itertools
import math
from operator import attrgetter

import numpy as np


class EmptyInput(ValueError):
    """smooth_max / smooth_min called with no values."""


class CycleDetected(RuntimeError):
    """Defensive check; cannot happen for graphs built through the ops here."""


class NonFiniteValue(ArithmeticError):
    """A checked evaluation produced NaN or infinity."""


_COUNTER = itertools.count()
_BY_IDX = attrgetter("_idx")


class Value:
    __slots__ = ("data", "grad", "_parents", "_partials", "_idx")

    def __init__(self, data, _parents=(), _partials=()):
        self.data = data
        self.grad = 0.0
        self._parents = _parents
        self._partials = _partials
        self._idx = next(_COUNTER)

    def __repr__(self):
        return f"Value({self.data})"

    def __add__(self, other):
        if type(other) is Value:
            return Value(self.data + other.data, (self, other), (1.0, 1.0))
        return Value(self.data + other, (self,), (1.0,))

    __radd__ = __add__

    def __sub__(self, other):
        if type(other) is Value:
            return Value(self.data - other.data, (self, other), (1.0, -1.0))
        return Value(self.data - other, (self,), (1.0,))

    def __rsub__(self, other):
        return Value(other - self.data, (self,), (-1.0,))

    def __mul__(self, other):
        if type(other) is Value:
            return Value(self.data * other.data, (self, other), (other.data, self.data))
        return Value(self.data * other, (self,), (other,))

    __rmul__ = __mul__

    def __neg__(self):
        return Value(-self.data, (self,), (-1.0,))


def _data(x):
    return x.data if type(x) is Value else x


def tanh(x):
    if type(x) is Value:
        t = math.tanh(x.data)
        return Value(t, (x,), (1.0 - t * t,))
    return math.tanh(x)


def relu(x):
    # Subgradient at the kink is taken as 0.
    if type(x) is Value:
        if x.data > 0.0:
            return Value(x.data, (x,), (1.0,))
        return Value(0.0, (x,), (0.0,))
    return x if x > 0.0 else 0.0


def _sigmoid_float(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def sigmoid(x):
    if type(x) is Value:
        s = _sigmoid_float(x.data)
        return Value(s, (x,), (s * (1.0 - s),))
    return _sigmoid_float(x)


def sqrt(x):
    if type(x) is Value:
        r = math.sqrt(x.data)
        return Value(r, (x,), (0.5 / r,))
    return math.sqrt(x)


def cos(x):
    if type(x) is Value:
        return Value(math.cos(x.data), (x,), (-math.sin(x.data),))
    return math.cos(x)


def sin(x):
    if type(x) is Value:
        return Value(math.sin(x.data), (x,), (math.cos(x.data),))
    return math.sin(x)


def _accumulate(weights, inputs, bias):
    """Shared dot-product accumulation for the affine family."""
    total = bias.data if type(bias) is Value else bias
    parents = []
    partials = []
    ap = parents.append
    aq = partials.append
    for w, x in zip(weights, inputs):
        if type(w) is Value:
            wd = w.data
            if type(x) is Value:
                xd = x.data
                ap(w)
                aq(xd)
                ap(x)
                aq(wd)
            else:
                xd = x
                ap(w)
                aq(xd)
        else:
            wd = w
            if type(x) is Value:
                xd = x.data
                ap(x)
                aq(wd)
            else:
                xd = x
        total += wd * xd
    if type(bias) is Value:
        ap(bias)
        aq(1.0)
    return total, parents, partials


def affine(weights, inputs, bias=0.0):
    """sum_i weights[i] * inputs[i] + bias as one node.

    Any operand may be a number or a Value; numbers contribute to the
    payload only. Collapsing the dot product into a single node keeps
    recurrent rollout graphs small.
    """
    total, parents, partials = _accumulate(weights, inputs, bias)
    if not parents:
        return total
    return Value(total, tuple(parents), tuple(partials))


def affine_tanh(weights, inputs, bias=0.0):
    """tanh(affine(...)) fused into one node."""
    total, parents, partials = _accumulate(weights, inputs, bias)
    t = math.tanh(total)
    if not parents:
        return t
    d = 1.0 - t * t
    return Value(t, tuple(parents), tuple([p * d for p in partials]))


def affine_sigmoid(weights, inputs, bias=0.0):
    """sigmoid(affine(...)) fused into one node."""
    total, parents, partials = _accumulate(weights, inputs, bias)
    s = _sigmoid_float(total)
    if not parents:
        return s
    d = s * (1.0 - s)
    return Value(s, tuple(parents), tuple([p * d for p in partials]))


def smooth_max(vals, tau):
    """Softmax-weighted average: sum_i w_i v_i with w = softmax(v / tau).

    Bounded between min(v) and max(v) and approaches max(v) as tau -> 0.
    """
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if len(vals) == 0:
        raise EmptyInput("smooth_max of no values")
    data = [v.data if type(v) is Value else v for v in vals]
    m = max(data)
    ws = [math.exp((d - m) / tau) for d in data]
    z = sum(ws)
    s = sum(w * d for w, d in zip(ws, data)) / z
    parents = []
    partials = []
    for v, d, w in zip(vals, data, ws):
        if type(v) is Value:
            parents.append(v)
            partials.append((w / z) * (1.0 + (d - s) / tau))
    if not parents:
        return s
    return Value(s, tuple(parents), tuple(partials))


def smooth_min(vals, tau):
    """-smooth_max(-v, tau); bounded between min(v) and max(v)."""
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if len(vals) == 0:
        raise EmptyInput("smooth_min of no values")
    data = [v.data if type(v) is Value else v for v in vals]
    m = min(data)
    ws = [math.exp(-(d - m) / tau) for d in data]
    z = sum(ws)
    s = sum(w * d for w, d in zip(ws, data)) / z
    parents = []
    partials = []
    for v, d, w in zip(vals, data, ws):
        if type(v) is Value:
            parents.append(v)
            partials.append((w / z) * (1.0 - (d - s) / tau))
    if not parents:
        return s
    return Value(s, tuple(parents), tuple(partials))


def backward(out: Value) -> None:
    """Populate .grad on every node reachable from `out`.

    The sweep runs in reverse creation order (a topological order for any
    graph built through the ops above) with fixed-order accumulation, so
    identical graphs give bit-identical gradients. Expects a freshly built
    graph whose grads are still zero.
    """
    visited = {id(out)}
    seen = visited.add
    stack = [out]
    pop = stack.pop
    push = stack.append
    nodes = [out]
    keep = nodes.append
    while stack:
        n = pop()
        for p in n._parents:
            i = id(p)
            if i not in visited:
                seen(i)
                push(p)
                keep(p)
    nodes.sort(key=_BY_IDX, reverse=True)
    out.grad = 1.0
    for node in nodes:
        g = node.grad
        if g == 0.0:
            continue
        ni = node._idx
        for p, d in zip(node._parents, node._partials):
            if p._idx >= ni:
                raise CycleDetected("parent created after child; graph is not a DAG")
            p.grad += g * d


class ParamVector:
    """Named groups of real parameters with a stable flattening order."""

    def __init__(self, groups: dict[str, np.ndarray]):
        self.groups = {k: np.array(v, dtype=float) for k, v in groups.items()}

    @property
    def size(self) -> int:
        return sum(a.size for a in self.groups.values())

    def flatten(self) -> np.ndarray:
        if not self.groups:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.groups.values()])

    def with_flat(self, flat: np.ndarray) -> "ParamVector":
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.size:
            raise ValueError(f"expected {self.size} entries, got {flat.size}")
        out = {}
        i = 0
        for k, a in self.groups.items():
            out[k] = flat[i : i + a.size].reshape(a.shape).copy()
            i += a.size
        return ParamVector(out)

    def copy(self) -> "ParamVector":
        return ParamVector(self.groups)

    def leaves(self) -> dict[str, np.ndarray]:
        """Object arrays of leaf Values mirroring each group."""
        out = {}
        for k, a in self.groups.items():
            leaf = np.empty(a.shape, dtype=object)
            flat_a = a.ravel()
            flat_l = leaf.ravel()
            for i in range(a.size):
                flat_l[i] = Value(float(flat_a[i]))
            out[k] = leaf
        return out

    def grads(self, leaves: dict[str, np.ndarray]) -> "ParamVector":
        """Collect .grad from a leaves() structure after backward()."""
        out = {}
        for k, a in self.groups.items():
            g = np.zeros(a.shape)
            flat_l = leaves[k].ravel()
            flat_g = g.ravel()
            for i in range(a.size):
                flat_g[i] = flat_l[i].grad
            out[k] = g
        return ParamVector(out)

    def to_jsonable(self) -> dict:
        return {k: a.tolist() for k, a in self.groups.items()}

    @classmethod
    def from_jsonable(cls, obj: dict) -> "ParamVector":
        return cls({k: np.array(v, dtype=float) for k, v in obj.items()})


def finite_diff_check(f, params: ParamVector, h: float = 1e-5, kink_tol: float = 1e-3) -> float:
    """Max relative error between backward() and central differences.

    `f` maps a leaves() structure to a scalar (Value or number).
    Coordinates sitting on a nondifferentiable point (one-sided slopes
    disagree, e.g. a ReLU kink) are skipped. Raises NonFiniteValue if any
    evaluation is NaN or infinite.
    """
    leaves = params.leaves()
    out = f(leaves)
    out_v = _data(out)
    if not math.isfinite(out_v):
        raise NonFiniteValue(f"objective evaluated to {out_v}")
    if type(out) is Value:
        backward(out)
        analytic = params.grads(leaves).flatten()
    else:
        analytic = np.zeros(params.size)

    base = params.flatten()

    def value_at(vec):
        v = _data(f(params.with_flat(vec).leaves()))
        if not math.isfinite(v):
            raise NonFiniteValue(f"objective evaluated to {v}")
        return v

    worst = 0.0
    for i in range(base.size):
        step = np.zeros_like(base)
        step[i] = h
        fp = value_at(base + step)
        fm = value_at(base - step)
        central = (fp - fm) / (2.0 * h)
        fwd = (fp - out_v) / h
        bwd = (out_v - fm) / h
        if abs(fwd - bwd) > kink_tol * (1.0 + abs(fwd) + abs(bwd)):
            continue
        err = abs(analytic[i] - central) / max(1.0, abs(central))
        if err > worst:
            worst = err
    return worst
