"""Property batteries over fresh random models.

These are the machine-checkable claims the architecture rests on:
equivariance of layers and of ODE solutions, invariance of pooled
predictions and of set likelihoods, invertibility of the flows,
gradient correctness of every primitive plus adjoint/backprop
agreement, and trace-estimator behavior.  The CLI `check` command runs
them and reports JSON; the test suite calls them directly with the
acceptance-criteria sample counts.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Graph, Params, forward
from .classifier import ClassifierModel, classify_forward
from .cnf import SetCnf, TraceConfig, log_likelihood, trace_exact, trace_hutchinson
from .layers import NetDynamics, build_equivariant_net, permute_elements
from .ode import (GraphDynamics, SolverConfig, adjoint_grad, integrate,
                  rk4_backprop_grads, roundtrip)
from .rng import make_rng
from .tvae import TemporalVae

FLAVORS = ("deepset", "attention", "concatsquash")


def random_net(flavor: str, d: int, rng, width: int = 8, depth: int = 2,
               store: Params | None = None):
    """A randomly initialized equivariant net of one flavor, d -> d."""
    store = store or Params()
    if flavor == "deepset":
        # mean pool: adaptive-solver properties assume smooth dynamics
        dims = [d + 1] + [width] * (depth - 1) + [d]
        cfgs = [{"type": "deepset", "d_in": dims[i], "d_out": dims[i + 1],
                 "pool": "mean",
                 "activation": "tanh" if i < len(dims) - 2 else "identity"}
                for i in range(len(dims) - 1)]
        time_mode = "concat"
    elif flavor == "attention":
        cfgs = [{"type": "attention", "d_in": d + 1, "d_h": width, "d_out": d}]
        time_mode = "concat"
    elif flavor == "concatsquash":
        dims = [d] + [width] * (depth - 1) + [d]
        cfgs = [{"type": "concatsquash", "d_in": dims[i], "d_out": dims[i + 1],
                 "activation": "tanh" if i < len(dims) - 2 else "identity"}
                for i in range(len(dims) - 1)]
        time_mode = "none"
    else:
        raise ValueError(f"unknown flavor {flavor!r}")
    net = build_equivariant_net(store, f"chk-{flavor}", cfgs, rng,
                                time_mode=time_mode, zero_init_last=False)
    return net, store


class IndexSabotage:
    """Deliberately breaks equivariance by injecting element indices."""

    def __init__(self, net):
        self.net = net
        self.time_mode = net.time_mode

    def build(self, g, x, t=0.0, cond=None):
        y = self.net.build(g, x, t, cond)
        b, n, d = y.value.shape
        bias = np.zeros((b, n, d))
        bias[:, :, 0] = np.linspace(0.0, 1.0, n)
        return g.add(y, g.const(bias))


def _case(name, worst, threshold):
    return {"name": name, "worst": float(worst), "threshold": float(threshold),
            "passed": bool(worst <= threshold)}


def _report(suite, cases):
    return {"suite": suite, "passed": all(c["passed"] for c in cases),
            "cases": cases}


# ---------------------------------------------------------------------------
# equivariance
# ---------------------------------------------------------------------------

def check_equivariance(n_models: int = 20, n_perms: int = 50, seed: int = 0,
                       n: int = 8, d: int = 3, sabotage: bool = False,
                       solve_tol: float = 1e-9):
    """Layer equivariance (exact / 1e-12) and rk4-solution equivariance."""
    rng = make_rng(seed, "check-equivariance")
    cases = []
    cfg = SolverConfig(method="rk4", steps=8)
    for flavor in FLAVORS:
        layer_worst = 0.0
        solve_worst = 0.0
        for m in range(n_models):
            net, store = random_net(flavor, d, rng)
            if sabotage:
                net = IndexSabotage(net)
            x = rng.standard_normal((2, n, d))
            g = Graph()
            base = net.build(g, g.input("x", x), 0.37).value
            dyn = NetDynamics(net, store)
            sol = integrate(dyn, x, 0.0, 1.0, cfg).y1
            for _ in range(n_perms):
                perm = rng.permutation(n)
                xp = permute_elements(x, perm)
                gp = Graph()
                outp = net.build(gp, gp.input("x", xp), 0.37).value
                layer_worst = max(layer_worst, float(np.max(np.abs(
                    outp - permute_elements(base, perm)))))
                solp = integrate(dyn, xp, 0.0, 1.0, cfg).y1
                solve_worst = max(solve_worst, float(np.max(np.abs(
                    solp - permute_elements(sol, perm)))))
        layer_tol = 1e-12 if flavor == "attention" else 0.0
        cases.append(_case(f"layer-equivariance-{flavor}", layer_worst, layer_tol))
        cases.append(_case(f"ode-solution-equivariance-{flavor}", solve_worst,
                           solve_tol))
    # random deep stacks of mixed flavors stay equivariant
    stack_worst = 0.0
    for m in range(max(3, n_models // 4)):
        store = Params()
        depth = int(rng.integers(2, 7))
        cfgs = []
        d_cur = d
        for i in range(depth):
            kind = ("deepset", "attention", "concatsquash")[int(rng.integers(3))]
            d_out = d if i == depth - 1 else int(rng.integers(3, 9))
            if kind == "attention":
                cfgs.append({"type": "attention", "d_in": d_cur, "d_h": 8,
                             "d_out": d_out})
            elif kind == "deepset":
                cfgs.append({"type": kind, "d_in": d_cur, "d_out": d_out,
                             "pool": ("mean", "max")[int(rng.integers(2))],
                             "activation": "tanh"})
            else:
                cfgs.append({"type": kind, "d_in": d_cur, "d_out": d_out,
                             "activation": "tanh"})
            d_cur = d_out
        net = build_equivariant_net(store, "stack", cfgs, rng,
                                    time_mode="none", zero_init_last=False)
        x = rng.standard_normal((2, n, d))
        g = Graph()
        base = net.build(g, g.input("x", x), 0.0).value
        for _ in range(10):
            perm = rng.permutation(n)
            gp = Graph()
            outp = net.build(gp, gp.input("x", permute_elements(x, perm)), 0.0).value
            stack_worst = max(stack_worst, float(np.max(np.abs(
                outp - permute_elements(base, perm)))))
    cases.append(_case("mixed-stack-equivariance", stack_worst, 1e-12))
    return _report("equivariance", cases)


# ---------------------------------------------------------------------------
# invariance
# ---------------------------------------------------------------------------

def check_invariance(n_models: int = 5, n_perms: int = 20, seed: int = 0,
                     n: int = 8, tol: float = 1e-9):
    """Pooled classifier logits, CNF log-likelihoods, and posterior params
    are unchanged by element permutations."""
    rng = make_rng(seed, "check-invariance")
    cases = []

    worst = 0.0
    for m in range(n_models):
        model = ClassifierModel({"d_in": 2, "d_h": 8, "n_classes": 3,
                                 "ode_steps": 4, "init_seed": int(rng.integers(1 << 30))})
        x = rng.standard_normal((3, n, 2))
        base = classify_forward(model, x)
        for _ in range(n_perms):
            xp = permute_elements(x, rng.permutation(n))
            worst = max(worst, float(np.max(np.abs(classify_forward(model, xp) - base))))
    cases.append(_case("classifier-logit-invariance", worst, tol))

    worst = 0.0
    for m in range(n_models):
        store = Params()
        net, _ = random_net("deepset" if m % 2 == 0 else "concatsquash", 2,
                            rng, store=store)
        flow = SetCnf(net, store, 2, solver=SolverConfig(method="rk4", steps=6))
        x = rng.standard_normal((3, n, 2))
        lp, _ = log_likelihood(flow, x, trace=TraceConfig(mode="exact"))
        for _ in range(n_perms):
            xp = permute_elements(x, rng.permutation(n))
            lpp, _ = log_likelihood(flow, xp, trace=TraceConfig(mode="exact"))
            worst = max(worst, float(np.max(np.abs(lpp - lp))))
    cases.append(_case("cnf-likelihood-invariance", worst, tol))

    worst = 0.0
    for m in range(max(2, n_models // 2)):
        model = TemporalVae({"d": 2, "latent_dim": 4, "enc_hidden": [8, 8],
                             "gru_hidden": 8, "dec_hidden": [8],
                             "init_seed": int(rng.integers(1 << 30))})
        series = rng.standard_normal((2, 3, n, 2))
        times = [0.0, 0.5, 1.0]
        mu, std = model.encode_series(series, times)
        for _ in range(n_perms):
            sp = np.stack([permute_elements(series[:, i], rng.permutation(n))
                           for i in range(series.shape[1])], axis=1)
            mu2, std2 = model.encode_series(sp, times)
            worst = max(worst, float(np.max(np.abs(mu2 - mu))),
                        float(np.max(np.abs(std2 - std))))
    cases.append(_case("posterior-invariance", worst, tol))
    return _report("invariance", cases)


# ---------------------------------------------------------------------------
# invertibility
# ---------------------------------------------------------------------------

def check_invertibility(n_models: int = 4, seed: int = 0, n: int = 8,
                        d: int = 2, tol: float = 1e-4,
                        extra_dynamics=None):
    """Forward-then-backward integration recovers the input state."""
    rng = make_rng(seed, "check-invertibility")
    cfg = SolverConfig(method="dopri5", rtol=1e-5, atol=1e-5)
    cases = []
    for flavor in FLAVORS:
        worst = 0.0
        for m in range(n_models):
            net, store = random_net(flavor, d, rng)
            dyn = NetDynamics(net, store)
            x = rng.standard_normal((2, n, d))
            _, _, err = roundtrip(dyn, x, 0.0, 1.0, cfg)
            worst = max(worst, err)
        cases.append(_case(f"roundtrip-{flavor}", worst, tol))
    if extra_dynamics is not None:
        name, dyn, x = extra_dynamics
        _, _, err = roundtrip(dyn, x, 0.0, 1.0, cfg)
        cases.append(_case(f"roundtrip-{name}", err, tol))
    return _report("invertibility", cases)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _fd_worst(g: Graph, inputs: dict, step: float = 1e-5) -> float:
    """Max relative error of backward() vs central differences over all
    entries of all bound inputs (terminal must be scalar)."""
    grads = g.backward_from(np.ones(()))
    worst = 0.0
    for name, val in inputs.items():
        analytic = g.input_grad(grads, name).reshape(-1)
        for k in range(val.size):
            pert = val.copy()
            pert.reshape(-1)[k] += step
            f_plus = float(forward(g, {**inputs, name: pert}))
            pert.reshape(-1)[k] -= 2 * step
            f_minus = float(forward(g, {**inputs, name: pert}))
            fd = (f_plus - f_minus) / (2 * step)
            a = analytic[k]
            worst = max(worst, abs(a - fd) / max(1.0, abs(a), abs(fd)))
    forward(g, inputs)
    return worst


def _gapped(rng, shape, lo=-2.0, hi=2.0, gap=2e-3, axis=None):
    """Random values whose per-slice pairwise gaps exceed `gap` so that
    max/relu stay locally smooth across the FD step."""
    for _ in range(100):
        x = rng.uniform(lo, hi, size=shape)
        if axis is None:
            ok = np.all(np.diff(np.sort(x.reshape(-1))) > gap)
        else:
            ok = np.all(np.diff(np.sort(x, axis=axis), axis=axis) > gap)
        if ok and np.all(np.abs(x) > gap):
            return x
    raise RuntimeError("could not draw gapped values")


def primitive_gradient_cases(rng):
    """(name, graph, inputs) triples covering every primitive's gradient."""
    u = lambda shape, lo=-2.0, hi=2.0: rng.uniform(lo, hi, size=shape)
    cases = []

    def scalar_case(name, fn, **inputs):
        g = Graph()
        nodes = {k: g.input(k, v) for k, v in inputs.items()}
        out = fn(g, **nodes)
        g.reduce_sum(g.mul(out, g.const(u(out.value.shape))) if out.value.shape
                     else out, axis=None)
        cases.append((name, g, {k: np.asarray(v, dtype=np.float64)
                                for k, v in inputs.items()}))

    scalar_case("matmul-2d", lambda g, a, b: g.matmul(a, b),
                a=u((3, 4)), b=u((4, 2)))
    scalar_case("matmul-3d-2d", lambda g, a, b: g.matmul(a, b),
                a=u((2, 3, 4)), b=u((4, 3)))
    scalar_case("matmul-3d-3d", lambda g, a, b: g.matmul(a, b),
                a=u((2, 3, 4)), b=u((2, 4, 2)))
    scalar_case("add", lambda g, a, b: g.add(a, b), a=u((3, 4)), b=u((3, 4)))
    scalar_case("add-suffix-broadcast", lambda g, a, b: g.add(a, b),
                a=u((2, 3, 4)), b=u((4,)))
    scalar_case("add-scalar-broadcast", lambda g, a, b: g.add(a, b),
                a=u((3, 4)), b=u(()))
    scalar_case("multiply", lambda g, a, b: g.mul(a, b), a=u((3, 4)), b=u((3, 4)))
    scalar_case("multiply-suffix-broadcast", lambda g, a, b: g.mul(a, b),
                a=u((2, 3, 4)), b=u((3, 4)))
    scalar_case("neg", lambda g, a: g.neg(a), a=u((3, 4)))
    scalar_case("scale", lambda g, a: g.scale(a, -1.7), a=u((3, 4)))
    scalar_case("tanh", lambda g, a: g.tanh(a), a=u((3, 4)))
    scalar_case("sigmoid", lambda g, a: g.sigmoid(a), a=u((3, 4)))
    scalar_case("relu", lambda g, a: g.relu(a), a=_gapped(rng, (3, 4)))
    scalar_case("exp", lambda g, a: g.exp(a), a=u((3, 4)))
    scalar_case("log", lambda g, a: g.log(a), a=u((3, 4), 0.1, 2.2))
    scalar_case("sqrt", lambda g, a: g.sqrt(a), a=u((3, 4), 0.1, 2.2))
    scalar_case("softmax-last", lambda g, a: g.softmax(a, axis=-1), a=u((3, 5)))
    scalar_case("softmax-mid", lambda g, a: g.softmax(a, axis=1), a=u((2, 4, 3)))
    scalar_case("sum-axis", lambda g, a: g.reduce_sum(a, axis=1), a=u((3, 4, 2)))
    scalar_case("sum-all", lambda g, a: g.reduce_sum(a, axis=None), a=u((3, 4)))
    scalar_case("mean-axis", lambda g, a: g.reduce_mean(a, axis=0), a=u((3, 4)))
    scalar_case("max-axis", lambda g, a: g.reduce_max(a, axis=1),
                a=_gapped(rng, (3, 5), axis=1))
    scalar_case("max-all", lambda g, a: g.reduce_max(a, axis=None),
                a=_gapped(rng, (8,)))
    scalar_case("concat", lambda g, a, b: g.concat([a, b], axis=1),
                a=u((2, 3)), b=u((2, 2)))
    scalar_case("slice", lambda g, a: g.slice_axis(a, 1, 1, 3), a=u((2, 4)))
    scalar_case("tile", lambda g, a: g.tile(a, 1, 3), a=u((2, 4)))
    scalar_case("broadcast", lambda g, a: g.broadcast(a, (3, 2, 4)), a=u((2, 4)))
    scalar_case("reshape", lambda g, a: g.reshape(a, (4, 3)), a=u((2, 6)))
    scalar_case("transpose", lambda g, a: g.transpose(a, (1, 0, 2)),
                a=u((2, 3, 4)))
    return cases


def check_gradients(n_seeds: int = 100, seed: int = 0, tol: float = 1e-4,
                    adjoint_tol: float = 1e-3):
    """FD agreement for every primitive over many seeds, plus adjoint vs
    backprop-through-rk4 agreement on equivariant dynamics."""
    cases = []
    worst_by_op: dict[str, float] = {}
    for s in range(n_seeds):
        rng = make_rng(seed, "check-gradients", s)
        for name, g, inputs in primitive_gradient_cases(rng):
            w = _fd_worst(g, inputs)
            worst_by_op[name] = max(worst_by_op.get(name, 0.0), w)
    for name, w in worst_by_op.items():
        cases.append(_case(f"fd-{name}", w, tol))

    rng = make_rng(seed, "check-gradients-adjoint")
    worst = 0.0
    for flavor in FLAVORS:
        net, store = random_net(flavor, 2, rng)
        dyn = NetDynamics(net, store)
        x = rng.standard_normal((1, 8, 2))
        seed_grad = np.ones_like(x)
        gy_a, gp_a = adjoint_grad(dyn, x, 0.0, 1.0,
                                  SolverConfig(method="dopri5",
                                               rtol=1e-8, atol=1e-8),
                                  seed_grad)
        gy_b, gp_b = rk4_backprop_grads(dyn, x, 0.0, 1.0, 64, seed_grad)
        rel = lambda a, b: float(np.max(
            np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))
        worst = max(worst, rel(gy_a, gy_b))
        for nm in store.trainable_names():
            worst = max(worst, rel(gp_a[nm], gp_b[nm]))
    cases.append(_case("adjoint-vs-backprop", worst, adjoint_tol))
    return _report("gradients", cases)


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------

class DenseLinearDynamics(GraphDynamics):
    """dz/dt = z @ A per element: a dense, non-equivariant test Jacobian."""

    def __init__(self, a: np.ndarray):
        self.a = np.asarray(a, dtype=np.float64)
        self.params = Params()
        self.params.add("lin.a", self.a, trainable=False)

    def build(self, g, y, t):
        return g.matmul(y, g.param_node(self.params, "lin.a"))

    def build_with_tangents(self, g, x, tangents, t, cond=None):
        an = g.param_node(self.params, "lin.a")
        return g.matmul(x, an), [g.matmul(dx, an) for dx in tangents]


class DiagonalDynamics(GraphDynamics):
    """dz/dt = a * z elementwise; Jacobian is a*I of the flattened state."""

    def __init__(self, a: float):
        self.a = float(a)
        self.params = Params()

    def build(self, g, y, t):
        return g.scale(y, self.a)


def check_trace(seed: int = 0, probes: int = 10_000, n: int = 4, d: int = 3):
    rng = make_rng(seed, "check-trace")
    cases = []

    # diagonal Jacobian: a single rademacher probe is already exact
    dd = DiagonalDynamics(0.83)
    s = rng.standard_normal((3, n, d))
    exact = trace_exact(dd, s, 0.0)
    one = trace_hutchinson(dd, s, 0.0,
                           TraceConfig(mode="hutchinson", probes=1),
                           make_rng(seed, "probe"))
    cases.append(_case("diagonal-one-probe-exact",
                       np.max(np.abs(one - exact)), 1e-12))
    cases.append(_case("diagonal-matches-a*n*d",
                       np.max(np.abs(exact - 0.83 * n * d)), 1e-12))

    # dense random linear: Monte-Carlo mean within 3 standard errors
    a = rng.standard_normal((d, d))
    lin = DenseLinearDynamics(a)
    s2 = rng.standard_normal((2, n, d))
    exact2 = trace_exact(lin, s2, 0.0)
    ests = []
    prng = make_rng(seed, "probes-mc")
    block = TraceConfig(mode="hutchinson", probes=100)
    for _ in range(probes // 100):
        ests.append(trace_hutchinson(lin, s2, 0.0, block, prng))
    ests = np.stack(ests)
    mean = ests.mean(axis=0)
    se = ests.std(axis=0, ddof=1) / np.sqrt(ests.shape[0])
    devs = np.abs(mean - exact2) / np.maximum(se, 1e-12)
    cases.append(_case("hutchinson-3-sigma", float(np.max(devs)), 3.0))

    # deepset linear layer: hand Jacobian n*tr(lam) + tr(gam)
    store = Params()
    net = build_equivariant_net(
        store, "lin-ds",
        [{"type": "deepset", "d_in": d, "d_out": d, "pool": "mean",
          "activation": "identity"}],
        rng, time_mode="none", zero_init_last=False)
    dyn = NetDynamics(net, store)
    s3 = rng.standard_normal((2, n, d))
    hand = n * np.trace(store["lin-ds.0.lam"]) + np.trace(store["lin-ds.0.gam"])
    got = trace_exact(dyn, s3, 0.0)
    cases.append(_case("deepset-hand-jacobian",
                       float(np.max(np.abs(got - hand))), 1e-10))
    return _report("trace", cases)


SUITES = {
    "equivariance": check_equivariance,
    "invariance": check_invariance,
    "invertibility": check_invertibility,
    "gradients": check_gradients,
    "trace": check_trace,
}


def run_suite(name: str, seed: int = 0, sabotage: bool = False,
              fast: bool = False) -> dict:
    """Run one named suite; `fast` shrinks sample counts for smoke use."""
    if name not in SUITES:
        raise KeyError(f"unknown check suite {name!r}; "
                       f"choose from {sorted(SUITES)}")
    kwargs: dict = {"seed": seed}
    if name == "equivariance":
        kwargs["sabotage"] = sabotage
        if fast:
            kwargs.update(n_models=3, n_perms=8)
    elif sabotage:
        raise ValueError("--sabotage applies to the equivariance suite only")
    elif fast:
        if name == "invariance":
            kwargs.update(n_models=2, n_perms=5)
        elif name == "gradients":
            kwargs.update(n_seeds=5)
        elif name == "trace":
            kwargs.update(probes=2000)
        elif name == "invertibility":
            kwargs.update(n_models=2)
    report = SUITES[name](**kwargs)
    report["sabotage"] = sabotage
    return report
