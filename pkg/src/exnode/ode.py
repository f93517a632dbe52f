"""ODE integration: fixed-step RK4, adaptive Dormand-Prince 5(4), and
gradients through solutions by both the adjoint method and
backprop-through-the-solver.

State is an arbitrary-shape float64 ndarray.  Dynamics come in two
flavors: any plain callable ``f(y, t) -> dy/dt`` integrates fine, while
gradient routes (``adjoint_grad``, ``rk4_chain``) additionally need the
``GraphDynamics`` interface so the dynamics can be expressed on a tape.

Integration direction follows the sign of ``t1 - t0``; backward-in-time
solves need no special casing, which is what makes these flows
invertible by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node, Params
from .errors import MaxStepsExceeded, NonFiniteDynamics


class GraphDynamics:
    """Dynamics whose vector field is built on an autodiff tape.

    Subclasses implement ``build`` and carry a ``params`` store.  The
    plain-value call and the vector-Jacobian product both derive from
    it, so a single definition serves the solver, the adjoint pass and
    backprop-through-the-solver.
    """

    params: Params

    def build(self, g: Graph, y: Node, t: float) -> Node:
        raise NotImplementedError

    def __call__(self, y: np.ndarray, t: float) -> np.ndarray:
        g = Graph()
        return self.build(g, g.input("y", y), t).value

    def vjp(self, y: np.ndarray, t: float, seed: np.ndarray):
        """Returns (f(y,t), seed^T df/dy, {name: seed^T df/dtheta})."""
        g = Graph()
        out = self.build(g, g.input("y", y), t)
        grads = g.backward_from(seed, node=out)
        return out.value, g.input_grad(grads, "y"), g.param_grads(grads)

    @property
    def n_params(self) -> int:
        return self.params.n_entries()


@dataclass
class SolverConfig:
    """Integrator selection and its controls.

    rk4 uses `steps` equal steps; dopri5 uses the (rtol, atol) error
    test with at most `max_steps` attempted steps.
    """

    method: str = "dopri5"
    steps: int = 8
    rtol: float = 1e-5
    atol: float = 1e-5
    max_steps: int = 10_000

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.steps < 1:
            raise ValueError("step count must be >= 1")
        if not (0.0 < self.rtol < 1.0 and 0.0 < self.atol < 1.0):
            raise ValueError("rtol and atol must lie in (0, 1)")
        if self.max_steps < 1:
            raise ValueError("max steps must be >= 1")

    def to_dict(self) -> dict:
        return {"method": self.method, "steps": self.steps,
                "rtol": self.rtol, "atol": self.atol,
                "max_steps": self.max_steps}


@dataclass
class OdeResult:
    y1: np.ndarray
    nfev: int = 0
    naccept: int = 0
    nreject: int = 0


def _check_finite(k: np.ndarray, t: float):
    if not np.all(np.isfinite(k)):
        bad = int(np.argmin(np.isfinite(k).reshape(-1)))
        raise NonFiniteDynamics(
            f"dynamics returned a non-finite value at t={t:.6g} "
            f"(flat entry {bad})")


# Dormand-Prince 5(4) tableau (Hairer, Norsett & Wanner).
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
# b - b_hat: weights of the embedded 4th-order error estimate
_DP_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920,
         -17253 / 339200, 22 / 525, -1 / 40)


def _integrate_rk4(dyn, y0, t0, t1, steps):
    y = np.array(y0, dtype=np.float64, copy=True)
    h = (t1 - t0) / steps
    nfev = 0
    for i in range(steps):
        t = t0 + i * h
        k1 = dyn(y, t)
        k2 = dyn(y + 0.5 * h * k1, t + 0.5 * h)
        k3 = dyn(y + 0.5 * h * k2, t + 0.5 * h)
        k4 = dyn(y + h * k3, t + h)
        nfev += 4
        _check_finite(k4, t + h)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return OdeResult(y, nfev=nfev, naccept=steps)


def _integrate_dopri5(dyn, y0, t0, t1, cfg: SolverConfig):
    # PI step control per Hairer: safety 0.9, growth clamped to [0.2, 10].
    safety, beta = 0.9, 0.04
    expo1 = 0.2 - 0.75 * beta
    facold = 1e-4
    y = np.array(y0, dtype=np.float64, copy=True)
    t = t0
    direction = 1.0 if t1 >= t0 else -1.0
    h = (t1 - t0) / 100.0
    nfev = naccept = nreject = 0
    k1 = dyn(y, t)
    nfev += 1
    _check_finite(k1, t)
    attempts = 0
    while direction * (t1 - t) > 0.0:
        if attempts >= cfg.max_steps:
            raise MaxStepsExceeded(
                f"dopri5 exceeded max_steps={cfg.max_steps} at t={t:.6g} "
                f"(accepted {naccept}, rejected {nreject})")
        attempts += 1
        if direction * (t + h - t1) > 0.0:
            h = t1 - t
        ks = [k1]
        for s in range(1, 7):
            ys = y + h * sum(a * k for a, k in zip(_DP_A[s], ks))
            ks.append(dyn(ys, t + _DP_C[s] * h))
            nfev += 1
        _check_finite(ks[-1], t + h)
        y1 = y + h * sum(b * k for b, k in zip(_DP_B, ks) if b != 0.0)
        err_vec = h * sum(e * k for e, k in zip(_DP_E, ks) if e != 0.0)
        sc = cfg.atol + cfg.rtol * np.maximum(np.abs(y), np.abs(y1))
        err = float(np.sqrt(np.mean((err_vec / sc) ** 2)))
        if err <= 1.0:
            naccept += 1
            t = t + h
            y = y1
            k1 = ks[6]  # FSAL: last stage is next step's first
            fac11 = err ** expo1
            fac = fac11 / facold ** beta
            fac = max(0.1, min(5.0, fac / safety))
            h = h / fac
            facold = max(err, 1e-4)
        else:
            nreject += 1
            fac11 = err ** expo1
            h = h / min(5.0, fac11 / safety)
    return OdeResult(y, nfev=nfev, naccept=naccept, nreject=nreject)


def integrate(dyn, y0, t0: float, t1: float, cfg: SolverConfig) -> OdeResult:
    """Solve dy/dt = dyn(y, t) from t0 to t1 (either direction)."""
    y0 = np.asarray(y0, dtype=np.float64)
    if not np.all(np.isfinite(y0)):
        raise NonFiniteDynamics("initial state contains non-finite entries")
    if t0 == t1:
        return OdeResult(y0.copy())
    if cfg.method == "rk4":
        return _integrate_rk4(dyn, y0, t0, t1, cfg.steps)
    return _integrate_dopri5(dyn, y0, t0, t1, cfg)


def roundtrip(dyn, y0, t0: float, t1: float, cfg: SolverConfig):
    """Integrate t0 -> t1 -> t0; returns (y1, y0_recovered, max_abs_error)."""
    fwd = integrate(dyn, y0, t0, t1, cfg)
    back = integrate(dyn, fwd.y1, t1, t0, cfg)
    err = float(np.max(np.abs(np.asarray(y0) - back.y1)))
    return fwd.y1, back.y1, err


def rk4_chain(g: Graph, dyn: GraphDynamics, y: Node, t0: float, t1: float,
              steps: int) -> Node:
    """Unroll a fixed-step RK4 solve as tape operations.

    Gradients through the returned node are the exact
    discretize-then-optimize gradients of the stepped scheme.
    """
    h = (t1 - t0) / steps
    for i in range(steps):
        t = t0 + i * h
        k1 = dyn.build(g, y, t)
        k2 = dyn.build(g, g.add(y, g.scale(k1, 0.5 * h)), t + 0.5 * h)
        k3 = dyn.build(g, g.add(y, g.scale(k2, 0.5 * h)), t + 0.5 * h)
        k4 = dyn.build(g, g.add(y, g.scale(k3, h)), t + h)
        incr = g.add(g.add(k1, k4), g.scale(g.add(k2, k3), 2.0))
        y = g.add(y, g.scale(incr, h / 6.0))
    return y


def rk4_backprop_grads(dyn: GraphDynamics, y0, t0: float, t1: float,
                       steps: int, loss_grad_at_y1):
    """Gradients (dL/dy0, {name: dL/dtheta}) by backprop through RK4."""
    g = Graph()
    yn = g.input("y0", y0)
    out = rk4_chain(g, dyn, yn, t0, t1, steps)
    grads = g.backward_from(loss_grad_at_y1, node=out)
    return g.input_grad(grads, "y0"), g.param_grads(grads)


def adjoint_grad(dyn: GraphDynamics, y0, t0: float, t1: float,
                 cfg: SolverConfig, loss_grad_at_y1):
    """Gradients (dL/dy0, {name: dL/dtheta}) via the adjoint ODE.

    Solves the augmented system [y, a, dL/dtheta] backwards from t1 to
    t0, re-evaluating the dynamics along the way instead of storing the
    forward trajectory.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    fwd = integrate(dyn, y0, t0, t1, cfg)
    names = dyn.params.trainable_names()
    sizes = [dyn.params[n].size for n in names]
    ny = y0.size
    npar = sum(sizes)

    def unpack_params(flat):
        out, off = {}, 0
        for n, s in zip(names, sizes):
            out[n] = flat[off:off + s].reshape(dyn.params[n].shape)
            off += s
        return out

    def aug(state, t):
        y = state[:ny].reshape(y0.shape)
        a = state[ny:2 * ny].reshape(y0.shape)
        f, dy_bar, pgrads = dyn.vjp(y, t, a)
        pieces = [f.reshape(-1), -dy_bar.reshape(-1)]
        if npar:
            # parameters the dynamics never touched contribute zero
            pieces.append(-np.concatenate(
                [np.asarray(pgrads.get(n, np.zeros(dyn.params[n].shape))
                            ).reshape(-1) for n in names]))
        return np.concatenate(pieces)

    s1 = np.concatenate([
        fwd.y1.reshape(-1),
        np.asarray(loss_grad_at_y1, dtype=np.float64).reshape(-1),
        np.zeros(npar),
    ])
    back = integrate(aug, s1, t1, t0, cfg)
    grad_y0 = back.y1[ny:2 * ny].reshape(y0.shape)
    grad_params = unpack_params(back.y1[2 * ny:])
    return grad_y0, grad_params
