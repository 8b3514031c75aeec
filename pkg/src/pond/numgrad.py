"""Small reverse-mode differentiation engine over dense float64 arrays.

A :class:`Graph` is a Wengert list. Nodes are appended by the op helpers in
this module (``matmul``, ``softmax``, ...) and evaluated eagerly whenever all
of their inputs already carry values. Leaves can be re-bound later and the
whole list replayed with :meth:`Graph.forward`, which is what finite-difference
checking relies on.

Broadcasting is deliberately narrow: two operands are compatible when they
have equal shapes or when one shape is a trailing suffix of the other (the
shorter operand is repeated over the extra leading axes). Anything else is a
:class:`~pond.errors.ShapeError`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphStateError, NumericFault, ShapeError

LN_EPS = 1e-5


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict
    name: str | None = None
    trainable: bool = False
    value: np.ndarray | None = None

    def describe(self, idx: int) -> str:
        """Human-readable locator used in error messages."""
        label = f"node {idx} ({self.kind}"
        if self.name:
            label += f" '{self.name}'"
        return label + ")"


class _Where:
    """Deferred node description; formatted only when an error is raised."""

    __slots__ = ("node", "idx")

    def __init__(self, node: Node, idx: int):
        self.node = node
        self.idx = idx

    def __str__(self) -> str:
        return self.node.describe(self.idx)

    __format__ = lambda self, spec: str(self)


class Var:
    """Handle to a node in a graph; supports the usual arithmetic operators."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", idx: int):
        self.graph = graph
        self.id = idx

    @property
    def node(self) -> Node:
        return self.graph.nodes[self.id]

    @property
    def value(self) -> np.ndarray:
        v = self.node.value
        if v is None:
            raise GraphStateError(f"{self.node.describe(self.id)} has not been evaluated")
        return v

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.graph.const(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, self._lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __repr__(self) -> str:
        return f"Var({self.node.describe(self.id)})"


# --------------------------------------------------------------------------
# broadcasting helpers


def _lead_shape(a: tuple, b: tuple, where: str) -> tuple:
    if a == b:
        return a
    long_, short = (a, b) if len(a) >= len(b) else (b, a)
    if len(short) == len(long_) or (short and long_[len(long_) - len(short):] != short):
        raise ShapeError(f"{where}: shapes {a} and {b} are not leading-axis compatible")
    return long_


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if extra > 0 else g


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# --------------------------------------------------------------------------
# primitive forward / backward rules
# fwd(attrs, *inputs) -> out;  bwd(attrs, g, out, *inputs) -> tuple of grads


def _matmul_fwd(at, a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"{at['_where']}: matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"{at['_where']}: inner extents differ, {a.shape} @ {b.shape}")
    _lead_shape(a.shape[:-2], b.shape[:-2], at["_where"])
    return a @ b


def _matmul_bwd(at, g, out, a, b):
    return _unbroadcast(g @ _swap(b), a.shape), _unbroadcast(_swap(a) @ g, b.shape)


def _add_fwd(at, a, b):
    _lead_shape(a.shape, b.shape, at["_where"])
    return a + b


def _add_bwd(at, g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(at, a, b):
    _lead_shape(a.shape, b.shape, at["_where"])
    return a - b


def _sub_bwd(at, g, out, a, b):
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _mul_fwd(at, a, b):
    _lead_shape(a.shape, b.shape, at["_where"])
    return a * b


def _mul_bwd(at, g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_fwd(at, a, b):
    _lead_shape(a.shape, b.shape, at["_where"])
    return a / b


def _div_bwd(at, g, out, a, b):
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd(at, g, out, x):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _lse_fwd(at, x):
    mx = x.max(axis=-1, keepdims=True)
    return (mx + np.log(np.exp(x - mx).sum(axis=-1, keepdims=True)))[..., 0]


def _lse_bwd(at, g, out, x):
    return (g[..., None] * _softmax(x),)


def _ln_stats(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    return (x - mu) * inv, inv


def _ln_fwd(at, x, gamma, beta):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"{at['_where']}: layer_norm scale/shift must be ({d},), got {gamma.shape}, {beta.shape}")
    xhat, _ = _ln_stats(x)
    return xhat * gamma + beta


def _ln_bwd(at, g, out, x, gamma, beta):
    xhat, inv = _ln_stats(x)
    dxhat = g * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    flat = (-1, x.shape[-1])
    return dx, (g * xhat).reshape(flat).sum(axis=0), g.reshape(flat).sum(axis=0)


def _axis(at, ndim):
    ax = at["axis"]
    if not -ndim <= ax < ndim:
        raise ShapeError(f"{at['_where']}: axis {ax} out of range for rank {ndim}")
    return ax % ndim


def _concat_fwd(at, *xs):
    ax = _axis(at, xs[0].ndim)
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or x.shape[:ax] + x.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ShapeError(f"{at['_where']}: cannot concat {[x.shape for x in xs]} on axis {ax}")
    return np.concatenate(xs, axis=ax)


def _concat_bwd(at, g, out, *xs):
    ax = _axis(at, out.ndim)
    cuts = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return tuple(np.split(g, cuts, axis=ax))


def _mean_fwd(at, x):
    return x.mean(axis=_axis(at, x.ndim))


def _mean_bwd(at, g, out, x):
    ax = _axis(at, x.ndim)
    return (np.broadcast_to(np.expand_dims(g, ax), x.shape) / x.shape[ax],)


def _sum_fwd(at, x):
    if at["axis"] is None:
        return np.asarray(x.sum())
    return x.sum(axis=_axis(at, x.ndim))


def _sum_bwd(at, g, out, x):
    if at["axis"] is None:
        return (np.broadcast_to(g, x.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, _axis(at, x.ndim)), x.shape).copy(),)


def _reshape_fwd(at, x):
    shape = tuple(at["shape"])
    try:
        return x.reshape(shape)
    except ValueError:
        raise ShapeError(f"{at['_where']}: cannot reshape {x.shape} to {shape}") from None


def _transpose_fwd(at, x):
    axes = at["axes"] if at["axes"] is not None else tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"{at['_where']}: bad permutation {axes} for rank {x.ndim}")
    return np.transpose(x, axes)


def _transpose_bwd(at, g, out, x):
    axes = at["axes"] if at["axes"] is not None else tuple(reversed(range(x.ndim)))
    return (np.transpose(g, np.argsort(axes)),)


def _ce_fwd(at, p, y):
    if p.shape != y.shape:
        raise ShapeError(f"{at['_where']}: probabilities {p.shape} vs one-hot {y.shape}")
    rows = p.size // p.shape[-1]
    return np.asarray(-(y * np.log(p)).sum() / rows)


def _ce_bwd(at, g, out, p, y):
    rows = p.size // p.shape[-1]
    return -g * y / p / rows, -g * np.log(p) / rows


def _gather_fwd(at, x):
    ax = _axis(at, x.ndim)
    idx = at["index"]
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[ax]):
        raise ShapeError(f"{at['_where']}: gather index out of range for extent {x.shape[ax]}")
    return np.take(x, idx, axis=ax)


def _gather_bwd(at, g, out, x):
    ax = _axis(at, x.ndim)
    gx = np.zeros_like(x)
    np.add.at(gx, (slice(None),) * ax + (at["index"],), g)
    return (gx,)


def _slice_fwd(at, x):
    ax = _axis(at, x.ndim)
    start, stop = at["start"], at["stop"]
    if not 0 <= start <= stop <= x.shape[ax]:
        raise ShapeError(f"{at['_where']}: slice [{start}:{stop}] outside extent {x.shape[ax]}")
    return x[(slice(None),) * ax + (slice(start, stop),)]


def _slice_bwd(at, g, out, x):
    ax = _axis(at, x.ndim)
    gx = np.zeros_like(x)
    gx[(slice(None),) * ax + (slice(at["start"], at["stop"]),)] = g
    return (gx,)


_OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "div": (_div_fwd, _div_bwd),
    "relu": (lambda at, x: np.maximum(x, 0.0), lambda at, g, y, x: (g * (x > 0),)),
    "tanh": (lambda at, x: np.tanh(x), lambda at, g, y, x: (g * (1.0 - y * y),)),
    "exp": (lambda at, x: np.exp(x), lambda at, g, y, x: (g * y,)),
    "log": (lambda at, x: np.log(x), lambda at, g, y, x: (g / x,)),
    "sqrt": (lambda at, x: np.sqrt(x), lambda at, g, y, x: (g / (2.0 * y),)),
    "scale": (lambda at, x: x * at["c"], lambda at, g, y, x: (g * at["c"],)),
    "softmax": (lambda at, x: _softmax(x), _softmax_bwd),
    "logsumexp": (_lse_fwd, _lse_bwd),
    "layer_norm": (_ln_fwd, _ln_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "reshape": (_reshape_fwd, lambda at, g, y, x: (g.reshape(x.shape),)),
    "transpose": (_transpose_fwd, _transpose_bwd),
    "cross_entropy": (_ce_fwd, _ce_bwd),
    "gather": (_gather_fwd, _gather_bwd),
    "slice": (_slice_fwd, _slice_bwd),
}

PRIMITIVES = tuple(sorted(_OPS))


# --------------------------------------------------------------------------
# graph


class Graph:
    """Ordered list of primitive-op records plus named leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[str, int] = {}

    # -- construction ------------------------------------------------------

    def leaf(self, name: str | None = None, value=None, *, trainable: bool = False) -> Var:
        if name is None:
            name = f"_leaf{len(self.nodes)}"
        if name in self._leaves:
            raise GraphStateError(f"duplicate leaf name '{name}'")
        node = Node("leaf", (), {}, name=name, trainable=trainable)
        if value is not None:
            node.value = _as_value(value)
        self._leaves[name] = len(self.nodes)
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def param(self, name: str, value) -> Var:
        return self.leaf(name, value, trainable=True)

    def const(self, value, name: str | None = None) -> Var:
        return self.leaf(name, value, trainable=False)

    def emit(self, kind: str, inputs: Sequence[Var], **attrs) -> Var:
        ids = []
        for v in inputs:
            if v.graph is not self:
                raise GraphStateError("operands belong to different graphs")
            ids.append(v.id)
        node = Node(kind, tuple(ids), attrs)
        self.nodes.append(node)
        idx = len(self.nodes) - 1
        if all(self.nodes[i].value is not None for i in ids):
            node.value = self._eval(idx)
        return Var(self, idx)

    # -- evaluation --------------------------------------------------------

    @property
    def leaf_names(self) -> list[str]:
        return list(self._leaves)

    @property
    def trainable(self) -> list[str]:
        return [n for n, i in self._leaves.items() if self.nodes[i].trainable]

    def leaf_value(self, name: str) -> np.ndarray:
        return self.nodes[self._leaves[name]].value

    def _eval(self, idx: int) -> np.ndarray:
        node = self.nodes[idx]
        xs = [self.nodes[i].value for i in node.inputs]
        fwd = _OPS[node.kind][0]
        attrs = dict(node.attrs, _where=_Where(node, idx))
        with np.errstate(all="ignore"):
            out = np.asarray(fwd(attrs, *xs), dtype=np.float64)
        if not np.isfinite(out).all() and all(np.isfinite(x).all() for x in xs):
            raise NumericFault(f"{node.describe(idx)} produced non-finite values from finite inputs")
        out.flags.writeable = False
        return out

    def forward(self, bindings: dict | None = None, root: Var | int | None = None) -> np.ndarray:
        """Bind leaves, replay every op in order and return the root value."""
        for name, value in (bindings or {}).items():
            if name not in self._leaves:
                raise GraphStateError(f"no leaf named '{name}'")
            self.nodes[self._leaves[name]].value = _as_value(value)
        for name, i in self._leaves.items():
            if self.nodes[i].value is None:
                raise GraphStateError(f"leaf '{name}' is unbound")
        for idx, node in enumerate(self.nodes):
            if node.kind != "leaf":
                node.value = self._eval(idx)
        return self.nodes[self._root_id(root)].value

    def _root_id(self, root) -> int:
        if root is None:
            if not self.nodes:
                raise GraphStateError("empty graph")
            return len(self.nodes) - 1
        return root.id if isinstance(root, Var) else int(root)

    def backward(self, root: Var | int | None = None) -> dict[str, np.ndarray]:
        """Gradient of a scalar root with respect to every trainable leaf."""
        rid = self._root_id(root)
        rnode = self.nodes[rid]
        if rnode.value is None:
            raise GraphStateError("backward called before forward")
        if rnode.value.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {rnode.value.shape}")

        needs = [False] * (rid + 1)
        for i in range(rid + 1):
            node = self.nodes[i]
            needs[i] = node.trainable if node.kind == "leaf" else any(needs[j] for j in node.inputs)
        grads: dict[int, np.ndarray] = {}
        if needs[rid]:
            grads[rid] = np.ones_like(rnode.value)
        for idx in range(rid, -1, -1):
            g = grads.pop(idx, None) if self.nodes[idx].kind != "leaf" else None
            if g is None:
                continue
            node = self.nodes[idx]
            xs = []
            for i in node.inputs:
                if self.nodes[i].value is None:
                    raise GraphStateError("backward called before forward")
                xs.append(self.nodes[i].value)
            attrs = dict(node.attrs, _where=_Where(node, idx))
            in_grads = _OPS[node.kind][1](attrs, g, node.value, *xs)
            for i, gi in zip(node.inputs, in_grads):
                if not needs[i] or gi is None:
                    continue
                grads[i] = grads[i] + gi if i in grads else np.array(gi, dtype=np.float64)

        out = {}
        for name, i in self._leaves.items():
            node = self.nodes[i]
            if node.trainable:
                out[name] = grads.get(i, np.zeros_like(node.value)) if i <= rid else np.zeros_like(node.value)
        return out


def _as_value(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


def forward(graph: Graph, bindings: dict | None = None, root=None) -> np.ndarray:
    return graph.forward(bindings, root)


def backward(graph: Graph, root=None) -> dict[str, np.ndarray]:
    return graph.backward(root)


# --------------------------------------------------------------------------
# op helpers


def matmul(a: Var, b: Var) -> Var:
    return a.graph.emit("matmul", (a, b))


def add(a: Var, b: Var) -> Var:
    return a.graph.emit("add", (a, b))


def sub(a: Var, b: Var) -> Var:
    return a.graph.emit("sub", (a, b))


def mul(a: Var, b: Var) -> Var:
    return a.graph.emit("mul", (a, b))


def div(a: Var, b: Var) -> Var:
    return a.graph.emit("div", (a, b))


def relu(x: Var) -> Var:
    return x.graph.emit("relu", (x,))


def tanh(x: Var) -> Var:
    return x.graph.emit("tanh", (x,))


def exp(x: Var) -> Var:
    return x.graph.emit("exp", (x,))


def log(x: Var) -> Var:
    return x.graph.emit("log", (x,))


def sqrt(x: Var) -> Var:
    return x.graph.emit("sqrt", (x,))


def scale(x: Var, c: float) -> Var:
    return x.graph.emit("scale", (x,), c=float(c))


def softmax(x: Var) -> Var:
    """Softmax over the last axis."""
    return x.graph.emit("softmax", (x,))


def logsumexp(x: Var) -> Var:
    """Stable log-sum-exp over the last axis (the axis is removed)."""
    return x.graph.emit("logsumexp", (x,))


def layer_norm(x: Var, gamma: Var, beta: Var) -> Var:
    return x.graph.emit("layer_norm", (x, gamma, beta))


def concat(xs: Sequence[Var], axis: int) -> Var:
    if not xs:
        raise ShapeError("concat of an empty list")
    return xs[0].graph.emit("concat", tuple(xs), axis=axis)


def mean(x: Var, axis: int) -> Var:
    return x.graph.emit("mean", (x,), axis=axis)


def reduce_sum(x: Var, axis: int | None = None) -> Var:
    return x.graph.emit("sum", (x,), axis=axis)


def reshape(x: Var, shape: Iterable[int]) -> Var:
    return x.graph.emit("reshape", (x,), shape=tuple(int(s) for s in shape))


def transpose(x: Var, axes: Sequence[int] | None = None) -> Var:
    return x.graph.emit("transpose", (x,), axes=None if axes is None else tuple(axes))


def cross_entropy(probs: Var, onehot: Var) -> Var:
    """Mean over rows of ``-sum(onehot * log(probs))``."""
    return probs.graph.emit("cross_entropy", (probs, onehot))


def gather(x: Var, index, axis: int) -> Var:
    return x.graph.emit("gather", (x,), index=np.asarray(index, dtype=np.intp), axis=axis)


def slice_axis(x: Var, start: int, stop: int, axis: int) -> Var:
    return x.graph.emit("slice", (x,), start=int(start), stop=int(stop), axis=axis)


def split(x: Var, sizes: Sequence[int], axis: int) -> list[Var]:
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, start, start + s, axis))
        start += s
    return out


# --------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    checked: int = 0
    max_rel_error: float = 0.0
    tol: float = 0.0
    worst: tuple[str, tuple] | None = None
    failures: list[tuple[str, tuple, float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def rel_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(graph: Graph, bindings: dict | None = None, step: float = 1e-5,
               tol: float = 1e-4, root=None, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences entry by entry.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    entries whose true gradient is zero from dividing by roundoff.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    graph.forward(bindings, root)
    analytic = graph.backward(root)
    report = GradCheckReport(tol=tol)
    for name, grad in analytic.items():
        base = np.array(graph.leaf_value(name))
        for index in np.ndindex(base.shape):
            plus = base.copy()
            plus[index] += step
            f_plus = float(graph.forward({name: plus}, root).sum())
            minus = base.copy()
            minus[index] -= step
            f_minus = float(graph.forward({name: minus}, root).sum())
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(grad[index])
            err = rel_error(a, numeric, floor)
            report.checked += 1
            if report.worst is None or err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (name, index)
            if not err <= tol:
                report.failures.append((name, index, a, numeric, err))
        graph.forward({name: base}, root)
    return report


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape if shape is not None else (fan_in, fan_out))
