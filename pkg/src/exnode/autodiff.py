"""Reverse-mode differentiation over dense float64 arrays.

The engine is a dynamic tape: a ``Graph`` is (re)built per call by
invoking op methods, each of which computes its value eagerly and
appends an operation record.  ``backward`` walks the tape in reverse and
accumulates exact gradients for every node, including named parameters
held in a ``Params`` store.

Values are plain C-contiguous ``numpy`` float64 arrays throughout.
Broadcasting is deliberately restricted to scalars and trailing-shape
(leading-axis) broadcast; everything else is a shape error, which keeps
every gradient rule auditable.

A ``Graph`` is single-user during forward/backward; distinct graphs may
run concurrently.  Parameter stores must not be mutated while a graph
that reads them is executing.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import (
    BackwardBeforeForwardError,
    CheckpointError,
    NonScalarOutputError,
    ShapeError,
    UnboundInputError,
)

CHECKPOINT_VERSION = "exnode-ckpt-v1"


def as_value(x) -> np.ndarray:
    """Coerce to a float64 ndarray (the only value type the tape holds)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a  # ascontiguousarray would promote scalars to shape (1,)
    return np.ascontiguousarray(a)


class Params:
    """Named parameter slots, each flagged trainable or frozen.

    Names are unique; insertion order is preserved and defines the
    canonical flattening order used by optimizers and the adjoint pass.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self._values:
            raise ValueError(f"parameter {name!r} already exists")
        v = as_value(value)
        self._values[name] = v
        self._trainable[name] = bool(trainable)
        return v

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def set(self, name: str, value) -> None:
        v = as_value(value)
        if v.shape != self._values[name].shape:
            raise ShapeError(
                f"parameter {name!r} has shape {self._values[name].shape}, "
                f"got {v.shape}")
        self._values[name] = v

    def names(self) -> list[str]:
        return list(self._values)

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def copy(self) -> "Params":
        out = Params()
        for n, v in self._values.items():
            out.add(n, v.copy(), self._trainable[n])
        return out

    def n_entries(self, trainable_only: bool = True) -> int:
        names = self.trainable_names() if trainable_only else self.names()
        return sum(self._values[n].size for n in names)

    # -- checkpoint I/O ----------------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        doc = {
            "version": CHECKPOINT_VERSION,
            "params": {
                n: {
                    "shape": list(v.shape),
                    "data": v.reshape(-1).tolist(),
                    "trainable": self._trainable[n],
                }
                for n, v in self._values.items()
            },
        }
        if meta:
            doc["meta"] = meta
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @staticmethod
    def load(path) -> tuple["Params", dict]:
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"expected checkpoint version {CHECKPOINT_VERSION!r}, "
                f"got {doc.get('version')!r}")
        out = Params()
        for n, rec in doc["params"].items():
            v = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
            out.add(n, v, rec.get("trainable", True))
        return out, doc.get("meta", {})


class Node:
    """One operation record on the tape."""

    __slots__ = ("idx", "op", "inputs", "value", "ctx", "name")

    def __init__(self, idx, op, inputs, value, ctx=None, name=None):
        self.idx = idx
        self.op = op
        self.inputs = inputs
        self.value = value
        self.ctx = ctx
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"node {self.idx} ({self.op}{tag})"


def _exp(a: np.ndarray) -> np.ndarray:
    # overflow to inf is a legitimate IEEE outcome here; downstream
    # finiteness guards report it, so no warning spam
    with np.errstate(over="ignore"):
        return np.exp(a)


def _log(a: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(a)


def _is_suffix(small, big) -> bool:
    k = len(small)
    return k <= len(big) and tuple(big[len(big) - k:]) == tuple(small)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead)))
    return g.reshape(shape)


class Graph:
    """Append-only operation tape with eager evaluation.

    Inputs are bound at declaration, so building a graph *is* its first
    forward pass.  ``forward`` replays the tape, optionally with rebound
    inputs, re-reading parameter stores as it goes; ``backward`` returns
    a gradient map over node ids.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._inputs: dict[str, int] = {}
        self._params: dict[str, int] = {}
        self._stores: dict[int, Params] = {}
        self._ran = False

    # -- leaf nodes ---------------------------------------------------------

    def input(self, name: str, value) -> Node:
        if value is None:
            raise UnboundInputError(f"input {name!r} declared without a value")
        if name in self._inputs:
            raise ValueError(f"input {name!r} already declared")
        n = self._append("input", (), as_value(value), name=name)
        self._inputs[name] = n.idx
        return n

    def const(self, value) -> Node:
        return self._append("const", (), as_value(value))

    def param(self, store: Params, name: str) -> Node:
        if name not in store:
            raise KeyError(f"no parameter named {name!r}")
        if name in self._params:
            raise ValueError(f"parameter {name!r} already placed in this graph")
        n = self._append("param", (), store[name], name=name)
        self._params[name] = n.idx
        self._stores[n.idx] = store
        return n

    def param_node(self, store: Params, name: str) -> Node:
        """Place a parameter, or return its existing node.

        Keeps the one-node-per-parameter invariant while letting reused
        modules (e.g. ODE dynamics invoked once per solver stage) share
        weights inside a single tape.
        """
        idx = self._params.get(name)
        if idx is not None:
            if self._stores[idx] is not store:
                raise ValueError(
                    f"parameter {name!r} already bound to a different store")
            return self.nodes[idx]
        return self.param(store, name)

    # -- op builders ----------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        self._check_broadcast("add", a, b)
        return self._append("add", (a, b), a.value + b.value)

    def sub(self, a: Node, b: Node) -> Node:
        return self.add(a, self.neg(b))

    def neg(self, a: Node) -> Node:
        return self._append("neg", (a,), -a.value)

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._append("scale", (a,), c * a.value, ctx=c)

    def mul(self, a: Node, b: Node) -> Node:
        self._check_broadcast("multiply", a, b)
        return self._append("mul", (a, b), a.value * b.value)

    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        ok = (
            (av.ndim == 2 and bv.ndim == 2 and av.shape[1] == bv.shape[0])
            or (av.ndim == 3 and bv.ndim == 2 and av.shape[2] == bv.shape[0])
            or (av.ndim == 3 and bv.ndim == 3 and av.shape[0] == bv.shape[0]
                and av.shape[2] == bv.shape[1])
        )
        if not ok:
            self._shape_error("matmul", [a, b])
        return self._append("matmul", (a, b), np.matmul(av, bv))

    def tanh(self, a: Node) -> Node:
        return self._append("tanh", (a,), kernels.tanh(a.value))

    def sigmoid(self, a: Node) -> Node:
        return self._append("sigmoid", (a,), kernels.sigmoid(a.value))

    def relu(self, a: Node) -> Node:
        return self._append("relu", (a,), kernels.relu(a.value))

    def exp(self, a: Node) -> Node:
        return self._append("exp", (a,), _exp(a.value))

    def log(self, a: Node) -> Node:
        return self._append("log", (a,), _log(a.value))

    def sqrt(self, a: Node) -> Node:
        return self._append("sqrt", (a,), np.sqrt(a.value))

    def softmax(self, a: Node, axis: int = -1) -> Node:
        axis = axis % a.value.ndim
        moved = np.moveaxis(a.value, axis, -1)
        val = np.moveaxis(kernels.softmax_lastaxis(moved), -1, axis)
        return self._append("softmax", (a,), np.ascontiguousarray(val), ctx=axis)

    def reduce_sum(self, a: Node, axis: int | None = None) -> Node:
        axis = self._norm_axis("sum", a, axis)
        return self._append(
            "sum", (a,), as_value(kernels.fsum_along(a.value, axis)), ctx=axis)

    def reduce_mean(self, a: Node, axis: int | None = None) -> Node:
        axis = self._norm_axis("mean", a, axis)
        k = a.value.size if axis is None else a.value.shape[axis]
        val = as_value(kernels.fsum_along(a.value, axis)) / k
        return self._append("mean", (a,), val, ctx=axis)

    def reduce_max(self, a: Node, axis: int | None = None) -> Node:
        axis = self._norm_axis("max", a, axis)
        return self._append("max", (a,), as_value(np.max(a.value, axis=axis)),
                            ctx=axis)

    def concat(self, parts: Sequence[Node], axis: int) -> Node:
        if not parts:
            raise ValueError("concat of zero nodes")
        axis = axis % parts[0].value.ndim
        for p in parts[1:]:
            sa, sb = parts[0].value.shape, p.value.shape
            if len(sa) != len(sb) or any(
                    i != axis and sa[i] != sb[i] for i in range(len(sa))):
                self._shape_error("concat", parts)
        val = np.concatenate([p.value for p in parts], axis=axis)
        return self._append("concat", tuple(parts), val, ctx=axis)

    def slice_axis(self, a: Node, axis: int, start: int, stop: int) -> Node:
        axis = axis % a.value.ndim
        if not (0 <= start < stop <= a.value.shape[axis]):
            self._shape_error(f"slice[{start}:{stop}]", [a])
        idx = tuple(slice(None) if i != axis else slice(start, stop)
                    for i in range(a.value.ndim))
        return self._append("slice", (a,), a.value[idx].copy(),
                            ctx=(axis, start, stop))

    def tile(self, a: Node, axis: int, reps: int) -> Node:
        """Insert a new axis at `axis` and repeat the array along it."""
        if not (0 <= axis <= a.value.ndim):
            self._shape_error("tile", [a])
        val = np.repeat(np.expand_dims(a.value, axis), reps, axis=axis)
        return self._append("tile", (a,), val, ctx=(axis, reps))

    def broadcast(self, a: Node, shape: Sequence[int]) -> Node:
        """Broadcast over new leading axes up to `shape` (suffix must match)."""
        shape = tuple(int(s) for s in shape)
        if not _is_suffix(a.value.shape, shape):
            self._shape_error(f"broadcast{shape}", [a])
        val = np.ascontiguousarray(np.broadcast_to(a.value, shape))
        return self._append("broadcast", (a,), val, ctx=shape)

    def reshape(self, a: Node, shape: Sequence[int]) -> Node:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != a.value.size:
            self._shape_error(f"reshape{shape}", [a])
        return self._append("reshape", (a,), a.value.reshape(shape), ctx=shape)

    def transpose(self, a: Node, axes: Sequence[int]) -> Node:
        axes = tuple(int(x) for x in axes)
        if sorted(axes) != list(range(a.value.ndim)):
            self._shape_error(f"transpose{axes}", [a])
        return self._append("transpose", (a,),
                            np.ascontiguousarray(a.value.transpose(axes)),
                            ctx=axes)

    # -- execution ----------------------------------------------------------

    def terminal(self) -> Node:
        if not self.nodes:
            raise BackwardBeforeForwardError("graph has no nodes")
        return self.nodes[-1]

    def replay(self, inputs: dict[str, np.ndarray] | None = None) -> np.ndarray:
        """Re-execute the tape, optionally rebinding named inputs."""
        if inputs is not None:
            for name in inputs:
                if name not in self._inputs:
                    raise UnboundInputError(f"graph has no input named {name!r}")
            for name, idx in self._inputs.items():
                if name not in inputs:
                    raise UnboundInputError(f"input {name!r} not bound")
                self.nodes[idx].value = as_value(inputs[name])
        for node in self.nodes:
            if node.op == "input":
                continue
            if node.op == "const":
                continue
            if node.op == "param":
                node.value = self._stores[node.idx][node.name]
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            node.value = _FORWARD[node.op](node, *vals)
        self._ran = True
        return self.terminal().value

    def backward_from(self, seed, node: Node | None = None) -> dict[int, np.ndarray]:
        if not self._ran or not self.nodes:
            raise BackwardBeforeForwardError(
                "backward called before any forward execution")
        target = self.terminal() if node is None else node
        seed = as_value(seed)
        if seed.shape != target.value.shape:
            raise ShapeError(
                f"seed shape {seed.shape} does not match output shape "
                f"{target.value.shape} of {target}")
        grads: dict[int, np.ndarray] = {target.idx: seed}
        for i in range(target.idx, -1, -1):
            g = grads.get(i)
            if g is None:
                continue
            node_i = self.nodes[i]
            if not node_i.inputs:
                continue
            contribs = _BACKWARD[node_i.op](
                node_i, g, [self.nodes[j].value for j in node_i.inputs])
            for j, c in zip(node_i.inputs, contribs):
                if c is None:
                    continue
                prev = grads.get(j)
                grads[j] = c if prev is None else prev + c
        return grads

    def param_grads(self, grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for name, idx in self._params.items():
            g = grads.get(idx)
            out[name] = np.zeros_like(self.nodes[idx].value) if g is None else g
        return out

    def input_grad(self, grads: dict[int, np.ndarray], name: str) -> np.ndarray:
        idx = self._inputs[name]
        g = grads.get(idx)
        return np.zeros_like(self.nodes[idx].value) if g is None else g

    def param_stores(self) -> list[Params]:
        seen = []
        for store in self._stores.values():
            if all(store is not s for s in seen):
                seen.append(store)
        return seen

    # -- internals ----------------------------------------------------------

    def _append(self, op, inputs: tuple, value: np.ndarray,
                ctx=None, name=None) -> Node:
        node = Node(len(self.nodes), op,
                    tuple(n.idx for n in inputs), value, ctx, name)
        self.nodes.append(node)
        self._ran = True
        return node

    def _check_broadcast(self, opname, a: Node, b: Node):
        sa, sb = a.value.shape, b.value.shape
        if sa == sb or _is_suffix(sb, sa) or _is_suffix(sa, sb):
            return
        self._shape_error(opname, [a, b])

    def _norm_axis(self, opname, a: Node, axis):
        if axis is None:
            return None
        if not (-a.value.ndim <= axis < a.value.ndim):
            self._shape_error(f"{opname}(axis={axis})", [a])
        return axis % a.value.ndim

    def _shape_error(self, opname, operands: Iterable[Node]):
        shapes = ", ".join(str(n.value.shape) for n in operands)
        raise ShapeError(
            f"node {len(self.nodes)} ({opname}): incompatible operand "
            f"shapes {shapes}")


# ---------------------------------------------------------------------------
# forward replay rules (ctx-driven recomputation, mirrors the builders)
# ---------------------------------------------------------------------------

_FORWARD: dict[str, Callable] = {
    "add": lambda n, a, b: a + b,
    "neg": lambda n, a: -a,
    "scale": lambda n, a: n.ctx * a,
    "mul": lambda n, a, b: a * b,
    "matmul": lambda n, a, b: np.matmul(a, b),
    "tanh": lambda n, a: kernels.tanh(a),
    "sigmoid": lambda n, a: kernels.sigmoid(a),
    "relu": lambda n, a: kernels.relu(a),
    "exp": lambda n, a: _exp(a),
    "log": lambda n, a: _log(a),
    "sqrt": lambda n, a: np.sqrt(a),
    "softmax": lambda n, a: np.ascontiguousarray(np.moveaxis(
        kernels.softmax_lastaxis(np.moveaxis(a, n.ctx, -1)), -1, n.ctx)),
    "sum": lambda n, a: as_value(kernels.fsum_along(a, n.ctx)),
    "mean": lambda n, a: as_value(kernels.fsum_along(a, n.ctx)) / (
        a.size if n.ctx is None else a.shape[n.ctx]),
    "max": lambda n, a: as_value(np.max(a, axis=n.ctx)),
    "concat": lambda n, *parts: np.concatenate(parts, axis=n.ctx),
    "slice": lambda n, a: a[tuple(
        slice(None) if i != n.ctx[0] else slice(n.ctx[1], n.ctx[2])
        for i in range(a.ndim))].copy(),
    "tile": lambda n, a: np.repeat(
        np.expand_dims(a, n.ctx[0]), n.ctx[1], axis=n.ctx[0]),
    "broadcast": lambda n, a: np.ascontiguousarray(np.broadcast_to(a, n.ctx)),
    "reshape": lambda n, a: a.reshape(n.ctx),
    "transpose": lambda n, a: np.ascontiguousarray(a.transpose(n.ctx)),
}


# ---------------------------------------------------------------------------
# backward rules: op -> fn(node, grad_out, input_values) -> grads per input
# ---------------------------------------------------------------------------

def _bwd_add(n, g, vals):
    a, b = vals
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bwd_mul(n, g, vals):
    a, b = vals
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _bwd_matmul(n, g, vals):
    a, b = vals
    if b.ndim == 2:
        da = np.matmul(g, b.T)
        a2 = a.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        db = np.matmul(a2.T, g2)
    else:
        da = np.matmul(g, b.transpose(0, 2, 1))
        db = np.matmul(a.transpose(0, 2, 1), g)
    return da, db


def _bwd_softmax(n, g, vals):
    axis = n.ctx
    y = np.moveaxis(n.value, axis, -1)
    gm = np.moveaxis(g, axis, -1)
    dx = kernels.softmax_lastaxis_grad(y, gm)
    return (np.ascontiguousarray(np.moveaxis(dx, -1, axis)),)


def _bwd_sum(n, g, vals):
    (a,) = vals
    if n.ctx is None:
        return (np.full(a.shape, float(g)),)
    return (np.ascontiguousarray(
        np.broadcast_to(np.expand_dims(g, n.ctx), a.shape)),)


def _bwd_mean(n, g, vals):
    (a,) = vals
    k = a.size if n.ctx is None else a.shape[n.ctx]
    if n.ctx is None:
        return (np.full(a.shape, float(g) / k),)
    return (np.ascontiguousarray(
        np.broadcast_to(np.expand_dims(g, n.ctx), a.shape)) / k,)


def _bwd_max(n, g, vals):
    # subgradient routed to the first maximal index (np.argmax convention)
    (a,) = vals
    out = np.zeros_like(a)
    if n.ctx is None:
        out.reshape(-1)[np.argmax(a)] = float(g)
        return (out,)
    idx = np.expand_dims(np.argmax(a, axis=n.ctx), n.ctx)
    np.put_along_axis(out, idx, np.expand_dims(g, n.ctx), axis=n.ctx)
    return (out,)


def _bwd_concat(n, g, vals):
    axis = n.ctx
    sizes = [v.shape[axis] for v in vals]
    offs = np.cumsum([0] + sizes)
    grads = []
    for k in range(len(vals)):
        idx = tuple(slice(None) if i != axis else slice(offs[k], offs[k + 1])
                    for i in range(g.ndim))
        grads.append(g[idx].copy())
    return tuple(grads)


def _bwd_slice(n, g, vals):
    (a,) = vals
    axis, start, stop = n.ctx
    out = np.zeros_like(a)
    idx = tuple(slice(None) if i != axis else slice(start, stop)
                for i in range(a.ndim))
    out[idx] = g
    return (out,)


_BACKWARD: dict[str, Callable] = {
    "add": _bwd_add,
    "neg": lambda n, g, v: (-g,),
    "scale": lambda n, g, v: (n.ctx * g,),
    "mul": _bwd_mul,
    "matmul": _bwd_matmul,
    "tanh": lambda n, g, v: (kernels.tanh_grad(n.value, g),),
    "sigmoid": lambda n, g, v: (kernels.sigmoid_grad(n.value, g),),
    "relu": lambda n, g, v: (kernels.relu_grad(n.value, g),),
    "exp": lambda n, g, v: (g * n.value,),
    "log": lambda n, g, v: (g / v[0],),
    "sqrt": lambda n, g, v: (0.5 * g / n.value,),
    "softmax": _bwd_softmax,
    "sum": _bwd_sum,
    "mean": _bwd_mean,
    "max": _bwd_max,
    "concat": _bwd_concat,
    "slice": _bwd_slice,
    "tile": lambda n, g, v: (g.sum(axis=n.ctx[0]),),
    "broadcast": lambda n, g, v: (_unbroadcast(g, v[0].shape),),
    "reshape": lambda n, g, v: (g.reshape(v[0].shape),),
    "transpose": lambda n, g, v: (
        np.ascontiguousarray(g.transpose(np.argsort(n.ctx))),),
}


# ---------------------------------------------------------------------------
# module-level operations per the engine's public contract
# ---------------------------------------------------------------------------

def forward(graph: Graph, inputs: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """Execute the graph and return the terminal node's value.

    With `inputs`, every named input is rebound before replay; all of
    them must be supplied.  Without `inputs`, the tape replays with its
    current bindings (re-reading parameter stores, so callers can
    perturb a store and re-run).
    """
    return graph.replay(inputs)


def backward(graph: Graph, seed) -> dict[int, np.ndarray]:
    """Reverse pass from the terminal node; returns node id -> gradient."""
    return graph.backward_from(seed)


class GradCheckReport:
    """Per-parameter comparison of backward() against central differences."""

    def __init__(self, max_rel_err: dict[str, float], tolerance: float):
        self.max_rel_err = max_rel_err
        self.tolerance = tolerance
        self.flagged = [n for n, e in max_rel_err.items() if e > tolerance]

    @property
    def passed(self) -> bool:
        return not self.flagged

    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def __repr__(self):
        status = "pass" if self.passed else f"FAIL {self.flagged}"
        return (f"GradCheckReport(worst={self.worst():.3e}, "
                f"tol={self.tolerance:.1e}, {status})")


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def grad_check(graph: Graph, tolerance: float, step: float = 1e-5,
               param_names: Sequence[str] | None = None) -> GradCheckReport:
    """Compare analytic parameter gradients against central differences.

    The graph's terminal node must be scalar-valued.  Every entry of
    every trainable parameter is perturbed by ±step with a full tape
    replay; the report flags parameters whose max relative error
    exceeds `tolerance`.
    """
    out = graph.terminal().value
    if out.size != 1:
        raise NonScalarOutputError(
            f"grad_check needs a scalar output, got shape {out.shape}")
    grads = graph.param_grads(graph.backward_from(np.ones_like(out)))
    errs: dict[str, float] = {}
    for name, idx in graph._params.items():
        store = graph._stores[idx]
        if not store.is_trainable(name):
            continue
        if param_names is not None and name not in param_names:
            continue
        analytic = grads[name].reshape(-1)
        theta = store[name]
        flat = theta.reshape(-1)
        worst = 0.0
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            f_plus = float(graph.replay())
            flat[k] = orig - step
            f_minus = float(graph.replay())
            flat[k] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            worst = max(worst, _rel_err(analytic[k], fd))
        errs[name] = worst
        graph.replay()  # restore cached values
    return GradCheckReport(errs, tolerance)
