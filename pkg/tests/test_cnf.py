"""Flow likelihood semantics: identity flow, the 1D closed form and its
discrete change-of-variables cross-check, exchangeability, trace
estimators, invertibility, sampling, and the training loop guards."""

import numpy as np
import pytest

from exnode import Graph, Params, SolverConfig
from exnode.checks import DenseLinearDynamics, DiagonalDynamics
from exnode.cnf import (FlowState, SetCnf, TraceConfig, base_logp, build_logp,
                        log_likelihood, sample, trace_exact, trace_hutchinson,
                        train_cnf)
from exnode.errors import TraceBudgetError, TrainingDiverged
from exnode.layers import build_equivariant_net, permute_elements
from exnode.ode import GraphDynamics
from exnode.rng import make_rng

from conftest import rel_err

LOG_2PI = np.log(2 * np.pi)


class ZeroNet:
    """Identity flow: dz/dt = 0 with a tangent rule of zero."""

    time_mode = "none"

    def build(self, g, x, t, cond=None):
        return g.scale(x, 0.0)

    def build_with_tangents(self, g, x, tangents, t, cond=None):
        return g.scale(x, 0.0), [g.scale(dx, 0.0) for dx in tangents]


class ScaleNet:
    """dz/dt = a*z: closed-form flow z(t) = z0 * exp(a t)."""

    time_mode = "none"

    def __init__(self, a):
        self.a = float(a)

    def build(self, g, x, t, cond=None):
        return g.scale(x, self.a)

    def build_with_tangents(self, g, x, tangents, t, cond=None):
        return g.scale(x, self.a), [g.scale(dx, self.a) for dx in tangents]


def _random_flow(rng, d=2, flavor="deepset", n_extra=0):
    store = Params()
    if flavor == "deepset":
        cfgs = [{"type": "deepset", "d_in": d + 1, "d_out": 6},
                {"type": "deepset", "d_in": 6, "d_out": d,
                 "activation": "identity"}]
        mode = "concat"
    else:
        cfgs = [{"type": "concatsquash", "d_in": d, "d_out": 6,
                 "activation": "tanh"},
                {"type": "concatsquash", "d_in": 6, "d_out": d}]
        mode = "none"
    net = build_equivariant_net(store, "f", cfgs, rng, time_mode=mode,
                                zero_init_last=False)
    return SetCnf(net, store, d, solver=SolverConfig(method="rk4", steps=8))


def test_flow_state_pack_roundtrip(rng):
    z = rng.standard_normal((3, 4, 2))
    delta = rng.standard_normal(3)
    st = FlowState(z, delta)
    back = FlowState.unpack(st.pack(), 4, 2)
    assert np.array_equal(back.z, z)
    assert np.array_equal(back.delta_logp, delta)


def test_base_logp_matches_formula(rng):
    z = rng.standard_normal((5, 3, 2))
    want = (-0.5 * (z ** 2).sum(axis=(1, 2)) - 0.5 * 6 * LOG_2PI)
    assert np.allclose(base_logp(z), want, atol=1e-12)


def test_identity_flow_logp_is_base_density(rng):
    cnf = SetCnf(ZeroNet(), Params(), 2)
    x = rng.standard_normal((4, 6, 2))
    logp, ppll = log_likelihood(cnf, x, trace=TraceConfig(mode="exact"))
    assert np.array_equal(logp, base_logp(x))
    assert ppll == pytest.approx(np.mean(logp) / 6)


def test_1d_linear_flow_closed_form():
    """log p(x) = log N(x e^a) + a: pins the sign convention of the
    delta-logp accumulator."""
    a = 0.6
    cnf = SetCnf(ScaleNet(a), Params(), 1,
                 solver=SolverConfig(method="dopri5", rtol=1e-9, atol=1e-9))
    x = np.array([[[0.3]], [[-1.1]], [[2.0]]])
    logp, _ = log_likelihood(cnf, x, trace=TraceConfig(mode="exact"))
    zf = x[:, 0, 0] * np.exp(a)
    want = -0.5 * zf ** 2 - 0.5 * LOG_2PI + a
    assert np.max(np.abs(logp - want)) < 1e-6


def test_linear_flow_matches_discrete_change_of_variables():
    """Continuous and discrete formulas agree: the explicit map q(x)=x e^A
    over [0,1] has sum log|det| = tr(A), matching the integrated trace."""
    rng = make_rng(4, "discrete-cov")
    a2 = 0.3 * rng.standard_normal((2, 2))
    dyn = DenseLinearDynamics(a2)

    class LinNet:
        time_mode = "none"

        def build(self, g, x, t, cond=None):
            return dyn.build(g, x, t)

        def build_with_tangents(self, g, x, tangents, t, cond=None):
            return dyn.build_with_tangents(g, x, tangents, t)

    cnf = SetCnf(LinNet(), dyn.params, 2,
                 solver=SolverConfig(method="dopri5", rtol=1e-10, atol=1e-10))
    x = rng.standard_normal((4, 3, 2))
    logp, _ = log_likelihood(cnf, x, trace=TraceConfig(mode="exact"))

    from scipy.linalg import expm
    m = expm(a2)  # z(1) = x @ expm(A) per element (row convention)
    z1 = x @ m
    n = x.shape[1]
    logdet_per_el = np.linalg.slogdet(m)[1]
    want = base_logp(z1) + n * logdet_per_el
    assert np.max(np.abs(logp - want)) < 1e-5


def test_loglik_permutation_invariance(rng):
    nrng = make_rng(11, "cnf-perm")
    for flavor in ("deepset", "concatsquash"):
        cnf = _random_flow(nrng, flavor=flavor)
        x = rng.standard_normal((3, 7, 2))
        lp, _ = log_likelihood(cnf, x, trace=TraceConfig(mode="exact"))
        for _ in range(20):
            xp = permute_elements(x, rng.permutation(7))
            lpp, _ = log_likelihood(cnf, xp, trace=TraceConfig(mode="exact"))
            assert np.max(np.abs(lpp - lp)) < 1e-9


def test_trace_exact_budget():
    cnf_dyn = DiagonalDynamics(1.0)
    s = np.zeros((1, 40, 30))
    with pytest.raises(TraceBudgetError):
        trace_exact(cnf_dyn, s, 0.0, cap=256)


def test_trace_hutchinson_diagonal_single_probe_exact(rng):
    dd = DiagonalDynamics(-1.3)
    s = rng.standard_normal((4, 5, 3))
    got = trace_hutchinson(dd, s, 0.0,
                           TraceConfig(mode="hutchinson", probes=1),
                           make_rng(0, "probe"))
    assert np.allclose(got, -1.3 * 15, atol=1e-12)


def test_trace_zero_dynamics(rng):
    class ZeroDyn(GraphDynamics):
        def __init__(self):
            self.params = Params()

        def build(self, g, y, t):
            return g.scale(y, 0.0)

    s = rng.standard_normal((2, 4, 2))
    assert np.array_equal(trace_exact(ZeroDyn(), s, 0.0), np.zeros(2))
    got = trace_hutchinson(ZeroDyn(), s, 0.0,
                           TraceConfig(mode="hutchinson", probes=7),
                           make_rng(1, "p"))
    assert np.array_equal(got, np.zeros(2))


def test_trace_hutchinson_converges_to_exact(rng):
    """Monte-Carlo error shrinks roughly as 1/sqrt(probes)."""
    a = rng.standard_normal((3, 3))
    dyn = DenseLinearDynamics(a)
    s = rng.standard_normal((2, 5, 3))
    exact = trace_exact(dyn, s, 0.0)
    errs = []
    for probes in (100, 1000, 10_000):
        est = trace_hutchinson(dyn, s, 0.0,
                               TraceConfig(mode="hutchinson", probes=probes),
                               make_rng(2, "mc", probes))
        errs.append(np.max(np.abs(est - exact)))
    assert errs[2] < errs[0]
    assert errs[2] < 0.5


def test_gaussian_probes_also_unbiased(rng):
    a = rng.standard_normal((2, 2))
    dyn = DenseLinearDynamics(a)
    s = rng.standard_normal((1, 4, 2))
    exact = trace_exact(dyn, s, 0.0)
    est = trace_hutchinson(dyn, s, 0.0,
                           TraceConfig(mode="hutchinson", probes=20_000,
                                       probe="gaussian"),
                           make_rng(3, "gauss"))
    assert np.max(np.abs(est - exact)) < 0.2


def test_sample_identity_flow_is_standard_normal():
    cnf = SetCnf(ZeroNet(), Params(), 2)
    rng = make_rng(8, "sample-normal")
    s = sample(cnf, 64, 200, rng)
    pts = s.reshape(-1, 2)
    n = len(pts)
    # mean CI ~ 3/sqrt(n); covariance diagonal near 1, off-diagonal near 0
    assert np.max(np.abs(pts.mean(axis=0))) < 3.0 / np.sqrt(n)
    cov = np.cov(pts.T)
    assert np.max(np.abs(cov - np.eye(2))) < 0.05


def test_sample_more_points_than_training_n(rng):
    cnf = _random_flow(make_rng(21, "big-n"))
    s = sample(cnf, 4 * 64, 2, make_rng(5, "s"),
               solver=SolverConfig(method="rk4", steps=8))
    assert s.shape == (2, 256, 2)
    assert np.all(np.isfinite(s))


def test_sample_then_loglik_roundtrip_finite(rng):
    cnf = _random_flow(make_rng(22, "roundtrip"))
    s = sample(cnf, 16, 3, make_rng(6, "s"))
    lp, ppll = log_likelihood(cnf, s, trace=TraceConfig(mode="exact"))
    assert np.all(np.isfinite(lp))
    assert np.isfinite(ppll)


def test_build_logp_matches_value_path(rng):
    """The differentiable tape route and the evaluation route agree."""
    cnf = _random_flow(make_rng(23, "two-routes"))
    x = rng.standard_normal((3, 5, 2))
    g = Graph()
    node = build_logp(g, cnf, g.input("x", x), steps=8,
                      trace_cfg=TraceConfig(mode="exact"),
                      rng=make_rng(0, "unused"))
    lp_value, _ = log_likelihood(cnf, x, SolverConfig(method="rk4", steps=8),
                                 TraceConfig(mode="exact"))
    assert np.max(np.abs(node.value - lp_value)) < 1e-9


def test_build_logp_gradients_match_fd(rng):
    """Training-route gradients (through the trace term) vs central FD."""
    cnf = _random_flow(make_rng(24, "fd"), flavor="concatsquash")
    x = rng.standard_normal((2, 4, 2))

    def loss_value():
        g = Graph()
        node = build_logp(g, cnf, g.input("x", x), steps=4,
                          trace_cfg=TraceConfig(mode="exact"),
                          rng=make_rng(0, "u"))
        return g, g.reduce_mean(node, axis=0)

    g, loss = loss_value()
    grads = g.param_grads(g.backward_from(np.ones(()), node=loss))
    store = cnf.params
    step = 1e-6
    for name in store.trainable_names():
        flat = store[name].reshape(-1)
        for k in range(min(flat.size, 4)):
            orig = flat[k]
            flat[k] = orig + step
            _, lp = loss_value()
            fp = float(lp.value)
            flat[k] = orig - step
            _, lm = loss_value()
            fm = float(lm.value)
            flat[k] = orig
            fd = (fp - fm) / (2 * step)
            assert rel_err(grads[name].reshape(-1)[k], fd) < 1e-4, name


def test_train_cnf_lr_zero_constant_ppll(rng):
    cnf = _random_flow(make_rng(25, "lr0"))
    data = rng.standard_normal((8, 6, 2))
    rep = train_cnf(cnf, data, data, {"lr": 0.0, "epochs": 3, "batch_size": 4,
                                      "seed": 0, "steps": 4})
    vals = [h["val_ppll"] for h in rep["epochs"]]
    assert vals[0] == pytest.approx(vals[-1], abs=1e-12)


def test_train_cnf_divergence_guard(rng):
    cnf = _random_flow(make_rng(26, "guard"))
    data = rng.standard_normal((6, 5, 2))
    with pytest.raises(TrainingDiverged):
        # an absurd lr forces a blow-up or a >10-nat drop quickly
        train_cnf(cnf, data, data, {"lr": 1e4, "epochs": 10, "batch_size": 3,
                                    "seed": 0, "steps": 4})


def test_train_cnf_improves_on_tiny_problem():
    rng = make_rng(27, "improve")
    cnf = _random_flow(rng, flavor="concatsquash")
    data = rng.standard_normal((24, 8, 2)) * 0.5 + 1.5
    rep = train_cnf(cnf, data, data, {"lr": 3e-3, "epochs": 8, "batch_size": 8,
                                      "seed": 0, "steps": 4})
    assert rep["epochs"][-1]["val_ppll"] > rep["epochs"][0]["val_ppll"]


def test_train_exact_vs_hutchinson_equivalent():
    """Training with the exact trace vs the single-probe estimator lands
    within 0.1 nats (identical data, seeds, and schedule)."""
    drng = make_rng(28, "est-data")
    data = drng.standard_normal((24, 8, 2)) * 0.6 + 1.0
    val = drng.standard_normal((12, 8, 2)) * 0.6 + 1.0
    finals = {}
    for mode in ("exact", "hutchinson"):
        cnf = _random_flow(make_rng(29, "est-model"), flavor="concatsquash")
        hyper = {"lr": 3e-3, "epochs": 10, "batch_size": 8, "seed": 0,
                 "steps": 4,
                 "trace": TraceConfig(mode=mode, probes=1),
                 "val_trace": TraceConfig(mode="exact")}
        rep = train_cnf(cnf, data, val, hyper)
        finals[mode] = rep["final_val_ppll"]
    assert abs(finals["exact"] - finals["hutchinson"]) < 0.1, finals
