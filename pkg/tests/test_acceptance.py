"""Acceptance criteria, one test per criterion.

Each test measures its criterion at the stated tolerance, prints one
PASS/FAIL line (run with `pytest tests/test_acceptance.py -v -s` to see
them live), and asserts both the criterion and its runtime budget.
Training criteria own the cost of the session-scoped models they train;
evaluation criteria time only their own measurements.
"""

import time

import numpy as np
import pytest

from exnode import checks
from exnode.classifier import ClassifierModel, classify_forward, train_classifier
from exnode.cnf import SetCnf, TraceConfig, log_likelihood, sample, train_cnf
from exnode.config import build_cnf_model
from exnode.datagen import (MixtureSpec, RotatingSeriesSpec, angle_difference,
                            gaussian_mle_ppll, gen_class_dataset,
                            gen_density_sets, gen_rotating_series,
                            procrustes_angle, series_angle)
from exnode.layers import NetDynamics, permute_elements
from exnode.ode import SolverConfig, roundtrip
from exnode.rng import make_rng
from exnode.tvae import TemporalVae, train_tvae


def report(criterion: int, passed: bool, detail: str):
    line = f"[criterion {criterion}] {'PASS' if passed else 'FAIL'} - {detail}"
    print(f"\n{line}", flush=True)
    return line


def random_flow(rng, flavor="deepset"):
    from exnode.autodiff import Params
    from exnode.layers import build_equivariant_net

    store = Params()
    if flavor == "deepset":
        cfgs = [{"type": "deepset", "d_in": 3, "d_out": 6},
                {"type": "deepset", "d_in": 6, "d_out": 2,
                 "activation": "identity"}]
        mode = "concat"
    else:
        cfgs = [{"type": "concatsquash", "d_in": 2, "d_out": 6,
                 "activation": "tanh"},
                {"type": "concatsquash", "d_in": 6, "d_out": 2}]
        mode = "none"
    net = build_equivariant_net(store, "f", cfgs, rng, time_mode=mode,
                                zero_init_last=False)
    return SetCnf(net, store, 2, solver=SolverConfig(method="rk4", steps=6))


# ---------------------------------------------------------------------------
# trained-model fixtures (cost charged to their own criteria)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def cnf_bundle():
    spec = MixtureSpec()
    train, _ = gen_density_sets(spec, 960, 64, 1)
    val, _ = gen_density_sets(spec, 200, 64, 10001)
    test, gold = gen_density_sets(spec, 300, 64, 20001)
    baseline = gaussian_mle_ppll(train, test)
    model = build_cnf_model({"d": 2, "flavor": "deepset", "hidden": [24, 24]},
                            SolverConfig(method="rk4", steps=8), seed=0)
    t0 = time.time()
    train_cnf(model, train, val,
              {"lr": 1e-3, "epochs": 30, "batch_size": 32, "seed": 0,
               "steps": 8, "decay_every": 100})
    return {"model": model, "test": test, "gold": gold, "baseline": baseline,
            "train_time": time.time() - t0}


@pytest.fixture(scope="session")
def tvae_bundle():
    spec = RotatingSeriesSpec(omega=np.pi / 2,
                              times=(0.0, 0.25, 0.5, 0.75, 1.0),
                              n=32, template_size=48, noise=0.03)
    times, series = gen_rotating_series(spec, 200, 42)
    _, heldout = gen_rotating_series(spec, 12, 777)
    model = TemporalVae({"d": 2, "latent_dim": 8, "enc_hidden": [16, 32],
                         "gru_hidden": 32, "dec_hidden": [24, 24],
                         "flow_steps": 6, "latent_steps": 4,
                         "latent_hidden": [16, 16], "init_seed": 0})
    t0 = time.time()
    rep = train_tvae(model, series, times,
                     {"lr": 1e-3, "epochs": 60, "batch_size": 8, "seed": 0})
    return {"model": model, "spec": spec, "times": times, "report": rep,
            "heldout": heldout, "train_time": time.time() - t0}


# ---------------------------------------------------------------------------
# 1. equivariance of ODE solutions
# ---------------------------------------------------------------------------

def test_criterion_1_equivariance_of_ode_solutions():
    t0 = time.time()
    rep = checks.check_equivariance(n_models=20, n_perms=50, seed=0,
                                    solve_tol=1e-9)
    elapsed = time.time() - t0
    solve_cases = [c for c in rep["cases"] if c["name"].startswith("ode-")]
    worst = max(c["worst"] for c in solve_cases)
    detail = (f"20 nets/flavor x 50 perms, rk4 solve commutes within "
              f"{worst:.2e} (tol 1e-9), {elapsed:.0f}s")
    line = report(1, rep["passed"] and elapsed < 60, detail)
    assert rep["passed"], line
    assert elapsed < 60, line


# ---------------------------------------------------------------------------
# 2. exchangeable likelihood
# ---------------------------------------------------------------------------

def test_criterion_2_exchangeable_likelihood():
    t0 = time.time()
    rng = make_rng(0, "criterion2")
    worst_inv = 0.0
    for m in range(20):
        flavor = "deepset" if m % 2 == 0 else "concatsquash"
        flow = random_flow(rng, flavor=flavor)
        x = rng.standard_normal((2, 6, 2))
        lp, _ = log_likelihood(flow, x, SolverConfig(method="rk4", steps=6),
                               TraceConfig(mode="exact"))
        for _ in range(5):
            xp = permute_elements(x, rng.permutation(6))
            lpp, _ = log_likelihood(flow, xp,
                                    SolverConfig(method="rk4", steps=6),
                                    TraceConfig(mode="exact"))
            worst_inv = max(worst_inv, float(np.max(np.abs(lpp - lp))))

    # 1D linear dynamics against the discrete change-of-variables oracle:
    # q(x) = x e^a, log p(x) = log N(x e^a) + log|det| with det = e^a
    a = 0.45

    class Scale1D:
        time_mode = "none"

        def build(self, g, x, t, cond=None):
            return g.scale(x, a)

        def build_with_tangents(self, g, x, tangents, t, cond=None):
            return g.scale(x, a), [g.scale(dx, a) for dx in tangents]

    from exnode.autodiff import Params
    flow1d = SetCnf(Scale1D(), Params(), 1,
                    solver=SolverConfig(method="dopri5", rtol=1e-9, atol=1e-9))
    x1 = rng.standard_normal((5, 3, 1))
    lp1, _ = log_likelihood(flow1d, x1, trace=TraceConfig(mode="exact"))
    z1 = x1 * np.exp(a)
    discrete = (-0.5 * (z1 ** 2).sum(axis=(1, 2))
                - 0.5 * 3 * np.log(2 * np.pi) + 3 * a)
    worst_1d = float(np.max(np.abs(lp1 - discrete)))
    elapsed = time.time() - t0

    ok = worst_inv < 1e-9 and worst_1d < 1e-5 and elapsed < 60
    line = report(2, ok, f"permutation invariance {worst_inv:.2e} (tol 1e-9) "
                         f"over 20 models; 1D discrete-oracle gap "
                         f"{worst_1d:.2e} (tol 1e-5), {elapsed:.0f}s")
    assert worst_inv < 1e-9, line
    assert worst_1d < 1e-5, line
    assert elapsed < 60, line


# ---------------------------------------------------------------------------
# 3. invertibility
# ---------------------------------------------------------------------------

def test_criterion_3_invertibility(cnf_bundle):
    t0 = time.time()
    rep = checks.check_invertibility(n_models=3, seed=0, tol=1e-4)
    worst = max(c["worst"] for c in rep["cases"])
    # trained dynamics from the density-estimation model
    model = cnf_bundle["model"]
    dyn = NetDynamics(model.net, model.params)
    x = make_rng(1, "criterion3").standard_normal((2, 16, 2))
    _, _, err_trained = roundtrip(dyn, x, 0.0, 1.0,
                                  SolverConfig(method="dopri5",
                                               rtol=1e-5, atol=1e-5))
    worst = max(worst, err_trained)
    elapsed = time.time() - t0
    ok = worst < 1e-4 and elapsed < 60
    line = report(3, ok, f"roundtrip max-abs {worst:.2e} (tol 1e-4) on random "
                         f"and trained dynamics at dopri5 1e-5, {elapsed:.0f}s")
    assert rep["passed"] and err_trained < 1e-4, line
    assert elapsed < 60, line


# ---------------------------------------------------------------------------
# 4. gradient correctness
# ---------------------------------------------------------------------------

def test_criterion_4_gradients():
    t0 = time.time()
    rep = checks.check_gradients(n_seeds=100, seed=0, tol=1e-4,
                                 adjoint_tol=1e-3)
    elapsed = time.time() - t0
    fd_worst = max(c["worst"] for c in rep["cases"]
                   if c["name"].startswith("fd-"))
    adj = next(c for c in rep["cases"] if c["name"] == "adjoint-vs-backprop")
    ok = rep["passed"] and elapsed < 120
    line = report(4, ok, f"primitive FD worst {fd_worst:.2e} (tol 1e-4, 100 "
                         f"seeds); adjoint vs backprop {adj['worst']:.2e} "
                         f"(tol 1e-3), {elapsed:.0f}s")
    assert rep["passed"], line
    assert elapsed < 120, line


# ---------------------------------------------------------------------------
# 5. Hutchinson estimator
# ---------------------------------------------------------------------------

def test_criterion_5_hutchinson():
    t0 = time.time()
    rep = checks.check_trace(seed=0, probes=10_000)
    elapsed = time.time() - t0
    diag = next(c for c in rep["cases"]
                if c["name"] == "diagonal-one-probe-exact")
    mc = next(c for c in rep["cases"] if c["name"] == "hutchinson-3-sigma")
    ok = rep["passed"] and elapsed < 60
    line = report(5, ok, f"diagonal one-probe deviation {diag['worst']:.2e}; "
                         f"dense 1e4-probe deviation {mc['worst']:.2f} "
                         f"standard errors (tol 3), {elapsed:.0f}s")
    assert rep["passed"], line
    assert elapsed < 60, line


# ---------------------------------------------------------------------------
# 6. desk-scale classification
# ---------------------------------------------------------------------------

def test_criterion_6_classification():
    t0 = time.time()
    train = gen_class_dataset(["ring", "cross", "gaussian-blobs"], 667, 64, 100)
    val = gen_class_dataset(["ring", "cross", "gaussian-blobs"], 167, 64, 10100)
    accs, epochs_used = [], []
    last_model = None
    for seed in range(5):
        model = ClassifierModel({"d_in": 2, "d_h": 16, "n_classes": 3,
                                 "ode_steps": 8, "init_seed": seed})
        rep = train_classifier(model, train, val,
                               {"lr": 1e-3, "epochs": 50, "batch_size": 100,
                                "seed": seed, "patience": 10,
                                "stop_at_val_acc": 0.96})
        accs.append(rep["best_val_acc"])
        epochs_used.append(len(rep["epochs"]))
        last_model = model
    mean, std = float(np.mean(accs)), float(np.std(accs, ddof=1))

    # invariance of the trained model's predictions
    rng = make_rng(2, "criterion6")
    x = val[0][:8]
    base = classify_forward(last_model, x)
    inv_worst = 0.0
    for _ in range(50):
        xp = permute_elements(x, rng.permutation(64))
        inv_worst = max(inv_worst, float(np.max(np.abs(
            classify_forward(last_model, xp) - base))))
    elapsed = time.time() - t0

    ok = min(accs) >= 0.95 and inv_worst < 1e-9 and elapsed < 900
    line = report(6, ok,
                  f"val accuracy {mean:.4f} +/- {std:.4f} over 5 seeds "
                  f"(min {min(accs):.4f}, tol >= 0.95, epochs used "
                  f"{epochs_used}); trained-logit invariance {inv_worst:.2e}; "
                  f"{elapsed:.0f}s")
    assert min(accs) >= 0.95, line
    assert inv_worst < 1e-9, line
    assert elapsed < 900, line


# ---------------------------------------------------------------------------
# 7. desk-scale density estimation
# ---------------------------------------------------------------------------

def test_criterion_7_density_estimation(cnf_bundle):
    t0 = time.time()
    model = cnf_bundle["model"]
    _, ppll = log_likelihood(model, cnf_bundle["test"],
                             SolverConfig(method="rk4", steps=12),
                             TraceConfig(mode="auto"))
    elapsed = cnf_bundle["train_time"] + (time.time() - t0)
    gold, baseline = cnf_bundle["gold"], cnf_bundle["baseline"]
    gap_gold = gold - ppll
    gap_base = ppll - baseline
    ok = gap_gold < 0.3 and gap_base >= 0.3 and elapsed < 1200
    line = report(7, ok,
                  f"test PPLL {ppll:.4f}; analytic generator {gold:.4f} "
                  f"(gap {gap_gold:.3f}, tol < 0.3); single-Gaussian MLE "
                  f"{baseline:.4f} (margin {gap_base:.3f}, tol >= 0.3); "
                  f"{elapsed:.0f}s incl. training")
    assert gap_gold < 0.3, line
    assert gap_base >= 0.3, line
    assert elapsed < 1200, line


# ---------------------------------------------------------------------------
# 8. temporal model
# ---------------------------------------------------------------------------

def test_criterion_8_temporal_model(tvae_bundle):
    t0 = time.time()
    model = tvae_bundle["model"]
    spec = tvae_bundle["spec"]
    times = tvae_bundle["times"]
    rep = tvae_bundle["report"]

    # ELBO trend: 5-epoch moving average non-decreasing over first 20 epochs
    elbos = np.array([h["elbo"] for h in rep["epochs"]])
    ma = np.convolve(elbos[:20], np.ones(5) / 5, mode="valid")
    trend_ok = bool(np.all(np.diff(ma) > -1e-9))
    kl_ok = all(h["kl"] >= 0.0 for h in rep["epochs"])

    # conditional generation at interpolated/extrapolated times: encode
    # held-out series, evolve the latent ODE to unseen instants, invert
    # the decoder flow on fresh base noise, then fit rotations
    eval_times = [0.0, 0.125, 0.25, 0.5, 0.75, 1.0, 1.25]
    want = np.array([series_angle(spec, t) for t in eval_times])
    mu, _ = model.encode_series(tvae_bundle["heldout"], times)
    cond = model.sample_series(eval_times, spec.n, make_rng(7, "c8-cond"),
                               count=len(mu), z0=mu)
    prior = model.sample_series(eval_times, spec.n, make_rng(7, "c8-prior"),
                                count=len(mu))

    def mean_rel_angles(samples):
        means = []
        for i in range(len(eval_times)):
            angles = [procrustes_angle(samples[c, 0], samples[c, i])
                      for c in range(samples.shape[0])]
            means.append(float(np.angle(np.mean(np.exp(1j * np.array(angles))))))
        return np.array(means)

    rel_cond = mean_rel_angles(cond)
    rel_prior = mean_rel_angles(prior)
    target = want - want[0]
    mae_cond = float(np.degrees(np.mean([abs(angle_difference(a, b))
                                         for a, b in zip(rel_cond, target)])))
    mae_prior = float(np.degrees(np.mean([abs(angle_difference(a, b))
                                          for a, b in zip(rel_prior, target)])))
    mono = bool(np.all(np.diff(rel_cond) < 0))
    elapsed = tvae_bundle["train_time"] + (time.time() - t0)

    ok = trend_ok and kl_ok and mono and mae_cond < 15.0 and elapsed < 1800
    line = report(8, ok,
                  f"conditional rotation MAE {mae_cond:.1f} deg (tol < 15), "
                  f"monotone {mono} over t={eval_times}; prior-sampled MAE "
                  f"{mae_prior:.1f} deg (informational); ELBO moving-average "
                  f"trend non-decreasing {trend_ok}; KL >= 0 {kl_ok}; "
                  f"{elapsed:.0f}s incl. training")
    assert trend_ok, line
    assert kl_ok, line
    assert mono, line
    assert mae_cond < 15.0, line
    assert elapsed < 1800, line


# ---------------------------------------------------------------------------
# 9. cardinality generalization
# ---------------------------------------------------------------------------

def test_criterion_9_cardinality_generalization(cnf_bundle):
    t0 = time.time()
    model = cnf_bundle["model"]
    solver = SolverConfig(method="rk4", steps=12)
    rng = make_rng(5, "criterion9")
    ppll = {}
    for n in (64, 128, 256, 512):
        s = sample(model, n, 16, rng, solver=solver)
        assert np.all(np.isfinite(s)), f"non-finite samples at n={n}"
        _, p = log_likelihood(model, s, solver, TraceConfig(mode="auto"),
                              rng=make_rng(6, "c9-eval", n))
        ppll[n] = p
    dev = max(abs(ppll[n] - ppll[64]) for n in (128, 256, 512))
    elapsed = time.time() - t0
    rounded = {n: round(p, 4) for n, p in ppll.items()}
    ok = dev < 0.5 and elapsed < 300
    line = report(9, ok,
                  f"sample PPLL by n {rounded}; max deviation from n=64 "
                  f"{dev:.3f} nats (tol < 0.5); {elapsed:.0f}s")
    assert dev < 0.5, line
    assert elapsed < 300, line
