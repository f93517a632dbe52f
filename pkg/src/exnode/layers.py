"""Permutation-equivariant, time-conditioned layers and their stacks.

A set batch is a float64 array of shape (batch, n, d): axis 1 carries
the set elements, and reordering it must commute with every layer here.
Three layer families are provided:

* ``DeepSetLayer``     -- elementwise affine plus a pooled (mean/max) path.
* ``SetAttentionLayer``-- scaled dot-product self-attention over elements.
* ``ConcatSquashLayer``-- elementwise affine gated and biased by functions
                          of a scalar time and an optional condition vector.

Layers build onto an autodiff ``Graph``.  Besides the primal
construction, every layer can also lay down *tangent* chains
(``build_jvp``): directional derivatives d(layer)/dx (dot) v expressed in
ordinary first-order ops.  Stacked through a network this yields
Jacobian-vector products of the dynamics as graph nodes, which is how
Jacobian-trace terms stay differentiable during training without any
second-order machinery.

Mean pooling uses the order-independent (correctly rounded) sum, so
deepset and concatsquash layers commute with permutations *exactly*,
bit for bit; attention is exact up to summation order in its matmuls.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Graph, Node, Params
from .ode import GraphDynamics


def as_set_batch(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"a set batch must be (batch, n, d), got {a.shape}")
    return np.ascontiguousarray(a)


def permute_elements(x: np.ndarray, perm) -> np.ndarray:
    """Reorder the elements of every set in the batch."""
    return np.ascontiguousarray(np.asarray(x)[:, np.asarray(perm), :])


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def _apply_act(g: Graph, s: Node, kind: str) -> Node:
    if kind == "tanh":
        return g.tanh(s)
    if kind == "relu":
        return g.relu(s)
    if kind == "identity":
        return s
    raise ValueError(f"unknown activation {kind!r}")


def _act_jvp(g: Graph, y: Node, ds: Node, kind: str) -> Node:
    if kind == "tanh":
        # d tanh(s) = (1 - y^2) ds
        return g.mul(ds, g.add(g.scale(g.mul(y, y), -1.0), g.const(1.0)))
    if kind == "relu":
        return g.mul(ds, g.const((y.value > 0).astype(np.float64)))
    if kind == "identity":
        return ds
    raise ValueError(f"unknown activation {kind!r}")


class DeepSetLayer:
    """sigma(x @ lam + pool(x) @ gam + bias), pooled over set elements."""

    def __init__(self, store: Params, prefix: str, d_in: int, d_out: int,
                 rng: np.random.Generator, pool: str = "mean",
                 activation: str = "tanh", zero_init: bool = False):
        if pool not in ("mean", "max"):
            raise ValueError(f"unknown pool kind {pool!r}")
        self.store = store
        self.prefix = prefix
        self.d_in, self.d_out = d_in, d_out
        self.pool = pool
        self.activation = activation
        if zero_init:
            store.add(f"{prefix}.lam", np.zeros((d_in, d_out)))
            store.add(f"{prefix}.gam", np.zeros((d_in, d_out)))
            store.add(f"{prefix}.b", np.zeros(d_out))
        else:
            store.add(f"{prefix}.lam", uniform_init(rng, (d_in, d_out), d_in))
            store.add(f"{prefix}.gam", uniform_init(rng, (d_in, d_out), d_in))
            store.add(f"{prefix}.b", uniform_init(rng, (d_out,), d_in))

    def _pre(self, g: Graph, x: Node) -> Node:
        n = x.value.shape[1]
        lam = g.param_node(self.store, f"{self.prefix}.lam")
        gam = g.param_node(self.store, f"{self.prefix}.gam")
        b = g.param_node(self.store, f"{self.prefix}.b")
        xm = g.matmul(x, lam)
        pooled = (g.reduce_mean(x, axis=1) if self.pool == "mean"
                  else g.reduce_max(x, axis=1))
        pm = g.tile(g.matmul(pooled, gam), 1, n)
        return g.add(g.add(xm, pm), b)

    def build(self, g: Graph, x: Node, t=None, cond=None) -> Node:
        return _apply_act(g, self._pre(g, x), self.activation)

    def build_jvp(self, g: Graph, x: Node, dxs, t=None, cond=None):
        n = x.value.shape[1]
        y = self.build(g, x, t, cond)
        lam = g.param_node(self.store, f"{self.prefix}.lam")
        gam = g.param_node(self.store, f"{self.prefix}.gam")
        if self.pool == "max":
            # route tangents through the (build-time) argmax of the primal
            idx = np.argmax(x.value, axis=1)
            mask = np.zeros_like(x.value)
            np.put_along_axis(mask, idx[:, None, :], 1.0, axis=1)
            mask_node = g.const(mask)
        dys = []
        for dx in dxs:
            dxm = g.matmul(dx, lam)
            if self.pool == "mean":
                dp = g.reduce_mean(dx, axis=1)
            else:
                dp = g.reduce_sum(g.mul(dx, mask_node), axis=1)
            ds = g.add(dxm, g.tile(g.matmul(dp, gam), 1, n))
            dys.append(_act_jvp(g, y, ds, self.activation))
        return y, dys


class SetAttentionLayer:
    """Scaled dot-product self-attention across set elements."""

    def __init__(self, store: Params, prefix: str, d_in: int, d_h: int,
                 d_out: int, rng: np.random.Generator, heads: int = 1,
                 activation: str = "identity", zero_init: bool = False):
        if d_h % heads != 0:
            raise ValueError(f"d_h={d_h} not divisible by heads={heads}")
        self.store = store
        self.prefix = prefix
        self.d_in, self.d_h, self.d_out = d_in, d_h, d_out
        self.heads = heads
        self.activation = activation
        for nm, shape, fan in (("wq", (d_in, d_h), d_in),
                               ("wk", (d_in, d_h), d_in),
                               ("wv", (d_in, d_h), d_in)):
            store.add(f"{prefix}.{nm}", uniform_init(rng, shape, fan))
        store.add(f"{prefix}.wo",
                  np.zeros((d_h, d_out)) if zero_init
                  else uniform_init(rng, (d_h, d_out), d_h))

    def _proj(self, g: Graph, x: Node):
        wq = g.param_node(self.store, f"{self.prefix}.wq")
        wk = g.param_node(self.store, f"{self.prefix}.wk")
        wv = g.param_node(self.store, f"{self.prefix}.wv")
        return g.matmul(x, wq), g.matmul(x, wk), g.matmul(x, wv)

    def _heads_of(self, g: Graph, z: Node):
        dh = self.d_h // self.heads
        return [g.slice_axis(z, 2, h * dh, (h + 1) * dh)
                for h in range(self.heads)]

    def build(self, g: Graph, x: Node, t=None, cond=None) -> Node:
        q, k, v = self._proj(g, x)
        scale = 1.0 / np.sqrt(self.d_h // self.heads)
        outs = []
        for qh, kh, vh in zip(self._heads_of(g, q), self._heads_of(g, k),
                              self._heads_of(g, v)):
            scores = g.scale(g.matmul(qh, g.transpose(kh, (0, 2, 1))), scale)
            att = g.softmax(scores, axis=2)
            outs.append(g.matmul(att, vh))
        o = outs[0] if len(outs) == 1 else g.concat(outs, axis=2)
        wo = g.param_node(self.store, f"{self.prefix}.wo")
        return _apply_act(g, g.matmul(o, wo), self.activation)

    def build_jvp(self, g: Graph, x: Node, dxs, t=None, cond=None):
        q, k, v = self._proj(g, x)
        scale = 1.0 / np.sqrt(self.d_h // self.heads)
        n = x.value.shape[1]
        qs, ks, vs = (self._heads_of(g, z) for z in (q, k, v))
        atts, outs = [], []
        for qh, kh, vh in zip(qs, ks, vs):
            scores = g.scale(g.matmul(qh, g.transpose(kh, (0, 2, 1))), scale)
            att = g.softmax(scores, axis=2)
            atts.append(att)
            outs.append(g.matmul(att, vh))
        o = outs[0] if len(outs) == 1 else g.concat(outs, axis=2)
        wo = g.param_node(self.store, f"{self.prefix}.wo")
        pre = g.matmul(o, wo)
        y = _apply_act(g, pre, self.activation)

        wq = g.param_node(self.store, f"{self.prefix}.wq")
        wk = g.param_node(self.store, f"{self.prefix}.wk")
        wv = g.param_node(self.store, f"{self.prefix}.wv")
        dys = []
        for dx in dxs:
            dq, dk, dv = (g.matmul(dx, w) for w in (wq, wk, wv))
            dqs, dks, dvs = (self._heads_of(g, z) for z in (dq, dk, dv))
            douts = []
            for qh, kh, vh, att, dqh, dkh, dvh in zip(qs, ks, vs, atts,
                                                      dqs, dks, dvs):
                dscores = g.scale(
                    g.add(g.matmul(dqh, g.transpose(kh, (0, 2, 1))),
                          g.matmul(qh, g.transpose(dkh, (0, 2, 1)))),
                    scale)
                # softmax JVP: att * (ds - rowsum(att * ds))
                inner = g.reduce_sum(g.mul(att, dscores), axis=2)
                datt = g.mul(att, g.sub(dscores, g.tile(inner, 2, n)))
                douts.append(g.add(g.matmul(datt, vh), g.matmul(att, dvh)))
            do = douts[0] if len(douts) == 1 else g.concat(douts, axis=2)
            dys.append(_act_jvp(g, y, g.matmul(do, wo), self.activation))
        return y, dys


class ConcatSquashLayer:
    """(x @ Wx + bx) * gate(t, cond) + bias(t, cond), shared across elements.

    gate = sigmoid(t*wt + cond @ Wtz + bt), bias = t*wb + cond @ Wbz + bb.
    Gate and bias depend only on (t, cond), so the map is equivariant and
    its Jacobian in x is simply diag(gate) (.) Wx per element.
    """

    def __init__(self, store: Params, prefix: str, d_in: int, d_out: int,
                 rng: np.random.Generator, cond_dim: int = 0,
                 activation: str = "identity", zero_init: bool = False):
        self.store = store
        self.prefix = prefix
        self.d_in, self.d_out, self.cond_dim = d_in, d_out, cond_dim
        self.activation = activation

        def w(shape, fan):
            return np.zeros(shape) if zero_init else uniform_init(rng, shape, fan)

        store.add(f"{prefix}.wx", w((d_in, d_out), d_in))
        store.add(f"{prefix}.bx", w((d_out,), d_in))
        gate_fan = cond_dim + 1
        store.add(f"{prefix}.wt", uniform_init(rng, (d_out,), gate_fan))
        store.add(f"{prefix}.bt", uniform_init(rng, (d_out,), gate_fan))
        store.add(f"{prefix}.wb", w((d_out,), gate_fan))
        store.add(f"{prefix}.bb", w((d_out,), gate_fan))
        if cond_dim:
            store.add(f"{prefix}.wtz", uniform_init(rng, (cond_dim, d_out), gate_fan))
            store.add(f"{prefix}.wbz", w((cond_dim, d_out), gate_fan))

    def _gate_bias(self, g: Graph, t: float, cond: Node | None):
        p = lambda nm: g.param_node(self.store, f"{self.prefix}.{nm}")
        gate_pre = g.add(g.scale(p("wt"), t), p("bt"))
        bias = g.add(g.scale(p("wb"), t), p("bb"))
        if self.cond_dim:
            if cond is None:
                raise ValueError(f"layer {self.prefix} needs a condition vector")
            gate_pre = g.add(g.matmul(cond, p("wtz")), gate_pre)
            bias = g.add(g.matmul(cond, p("wbz")), bias)
        return g.sigmoid(gate_pre), bias

    def _expand(self, g: Graph, z: Node, n: int) -> Node:
        # (d_out,) rides on suffix broadcast; (B, d_out) must tile over n
        return g.tile(z, 1, n) if z.value.ndim == 2 else z

    def build(self, g: Graph, x: Node, t: float = 0.0, cond=None) -> Node:
        n = x.value.shape[1]
        cond = self._cond_node(g, cond)
        gate, bias = self._gate_bias(g, t, cond)
        p = lambda nm: g.param_node(self.store, f"{self.prefix}.{nm}")
        main = g.add(g.matmul(x, p("wx")), p("bx"))
        pre = g.add(g.mul(main, self._expand(g, gate, n)),
                    self._expand(g, bias, n))
        return _apply_act(g, pre, self.activation)

    def build_jvp(self, g: Graph, x: Node, dxs, t: float = 0.0, cond=None):
        n = x.value.shape[1]
        cond = self._cond_node(g, cond)
        gate, bias = self._gate_bias(g, t, cond)
        p = lambda nm: g.param_node(self.store, f"{self.prefix}.{nm}")
        wx = p("wx")
        gate_x = self._expand(g, gate, n)
        main = g.add(g.matmul(x, wx), p("bx"))
        pre = g.add(g.mul(main, gate_x), self._expand(g, bias, n))
        y = _apply_act(g, pre, self.activation)
        dys = [_act_jvp(g, y, g.mul(g.matmul(dx, wx), gate_x), self.activation)
               for dx in dxs]
        return y, dys

    def _cond_node(self, g: Graph, cond):
        if cond is None or isinstance(cond, Node):
            return cond
        return g.const(np.asarray(cond, dtype=np.float64))


class LayerNorm:
    """Per-element normalization over the feature axis with learned scale/shift.

    Used in feature expanders and prediction heads in place of batch
    norm: it is equivariant (elementwise over the set) and independent
    of batch composition.
    """

    EPS = 1e-5

    def __init__(self, store: Params, prefix: str, dim: int):
        self.store = store
        self.prefix = prefix
        self.dim = dim
        store.add(f"{prefix}.g", np.ones(dim))
        store.add(f"{prefix}.b", np.zeros(dim))

    def build(self, g: Graph, x: Node) -> Node:
        d = x.value.shape[-1]
        ax = x.value.ndim - 1
        mu = g.tile(g.reduce_mean(x, axis=ax), ax, d)
        cen = g.sub(x, mu)
        var = g.tile(g.reduce_mean(g.mul(cen, cen), axis=ax), ax, d)
        inv = g.exp(g.scale(g.log(g.add(var, g.const(self.EPS))), -0.5))
        xn = g.mul(cen, inv)
        gamma = g.param_node(self.store, f"{self.prefix}.g")
        beta = g.param_node(self.store, f"{self.prefix}.b")
        return g.add(g.mul(xn, gamma), beta)


class EquivariantNet:
    """A stack of equivariant layers usable as ODE dynamics.

    With time_mode="concat", the scalar time is appended as an extra
    feature on every element before the first layer (so the first
    layer's d_in must be the data dim + 1).  Concatsquash stacks take
    time through their gates instead and use time_mode="none".
    """

    def __init__(self, layers, time_mode: str = "none"):
        if time_mode not in ("none", "concat"):
            raise ValueError(f"unknown time mode {time_mode!r}")
        self.layers = list(layers)
        self.time_mode = time_mode

    def build(self, g: Graph, x: Node, t: float = 0.0, cond=None) -> Node:
        h = self._inject_time(g, x, t)
        for layer in self.layers:
            h = layer.build(g, h, t, cond)
        return h

    def build_with_tangents(self, g: Graph, x: Node, tangents, t: float = 0.0,
                            cond=None):
        """Primal output plus one JVP chain per tangent seed node."""
        h = self._inject_time(g, x, t)
        dhs = list(tangents)
        if self.time_mode == "concat":
            zcol = g.const(np.zeros(x.value.shape[:2] + (1,)))
            dhs = [g.concat([dx, zcol], axis=2) for dx in dhs]
        for layer in self.layers:
            h, dhs = layer.build_jvp(g, h, dhs, t, cond)
        return h, dhs

    def _inject_time(self, g: Graph, x: Node, t: float) -> Node:
        if self.time_mode == "none":
            return x
        tcol = g.const(np.full(x.value.shape[:2] + (1,), float(t)))
        return g.concat([x, tcol], axis=2)


class NetDynamics(GraphDynamics):
    """Adapter exposing an EquivariantNet as solver dynamics dz/dt."""

    def __init__(self, net: EquivariantNet, params: Params, cond=None):
        self.net = net
        self.params = params
        self.cond = None if cond is None else np.asarray(cond, dtype=np.float64)

    def build(self, g: Graph, y: Node, t: float) -> Node:
        out = self.net.build(g, y, t, cond=self.cond)
        if out.value.shape != y.value.shape:
            raise ValueError(
                f"dynamics output shape {out.value.shape} does not match "
                f"state shape {y.value.shape}")
        return out


def build_equivariant_net(store: Params, prefix: str, layer_cfgs,
                          rng: np.random.Generator, time_mode: str = "none",
                          cond_dim: int = 0,
                          zero_init_last: bool = True) -> EquivariantNet:
    """Construct a net from a list of layer config dicts.

    Each entry needs "type" in {deepset, attention, concatsquash} with
    d_in/d_out plus family-specific knobs.  The final layer is
    zero-initialized by default so untrained dynamics start as the
    identity flow.
    """
    layers = []
    for i, cfg in enumerate(layer_cfgs):
        zero = zero_init_last and i == len(layer_cfgs) - 1
        kind = cfg["type"]
        name = f"{prefix}.{i}"
        if kind == "deepset":
            layers.append(DeepSetLayer(
                store, name, cfg["d_in"], cfg["d_out"], rng,
                pool=cfg.get("pool", "mean"),
                activation=cfg.get("activation", "tanh"),
                zero_init=zero))
        elif kind == "attention":
            layers.append(SetAttentionLayer(
                store, name, cfg["d_in"], cfg.get("d_h", cfg["d_out"]),
                cfg["d_out"], rng, heads=cfg.get("heads", 1),
                activation=cfg.get("activation", "identity"),
                zero_init=zero))
        elif kind == "concatsquash":
            layers.append(ConcatSquashLayer(
                store, name, cfg["d_in"], cfg["d_out"], rng,
                cond_dim=cond_dim,
                activation=cfg.get("activation", "identity"),
                zero_init=zero))
        else:
            raise ValueError(f"unknown layer type {kind!r}")
    return EquivariantNet(layers, time_mode=time_mode)
