"""Continuous-time VAE over temporal sets.

A series [x_{t_0}, ..., x_{t_N}] is encoded backwards in time: each set
is mapped to a permutation-invariant embedding (per-element net + max
pool), a recurrent cell consumes the embeddings from t_N down to t_0
with the time gap concatenated, and the final hidden state
parameterizes a diagonal-Gaussian posterior over z_{t_0}.  Latent states
at other times follow a learned autonomous ODE.  Each observed set is
scored by a conditional set flow whose concatsquash gates see the
physical time and the latent state; the flow's own integration variable
s runs over [0, 1] and is distinct from physical time.

Training maximizes the usual ELBO: summed per-step conditional
log-likelihood minus the closed-form KL between the posterior and the
standard-normal prior.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Graph, Node, Params
from .cnf import SetCnf, TraceConfig, build_logp, log_likelihood, sample
from .errors import TrainingDiverged
from .layers import LayerNorm, build_equivariant_net, uniform_init
from .ode import GraphDynamics, SolverConfig, integrate, rk4_chain
from .optim import Adam, decayed_lr
from .rng import make_rng


class _AffineSimple:
    def __init__(self, store, prefix, d_in, d_out, rng, zero_init=False):
        self.store, self.prefix = store, prefix
        if zero_init:
            store.add(f"{prefix}.w", np.zeros((d_in, d_out)))
            store.add(f"{prefix}.b", np.zeros(d_out))
        else:
            store.add(f"{prefix}.w", uniform_init(rng, (d_in, d_out), d_in))
            store.add(f"{prefix}.b", uniform_init(rng, (d_out,), d_in))

    def build(self, g, x):
        w = g.param_node(self.store, f"{self.prefix}.w")
        b = g.param_node(self.store, f"{self.prefix}.b")
        return g.add(g.matmul(x, w), b)


class GruCell:
    """Gated recurrent cell (reset/update/candidate gates)."""

    def __init__(self, store: Params, prefix: str, d_in: int, d_hid: int, rng):
        self.store, self.prefix = store, prefix
        self.d_in, self.d_hid = d_in, d_hid
        for gate in ("r", "u", "c"):
            store.add(f"{prefix}.wx{gate}", uniform_init(rng, (d_in, d_hid), d_in))
            store.add(f"{prefix}.wh{gate}", uniform_init(rng, (d_hid, d_hid), d_hid))
            store.add(f"{prefix}.b{gate}", np.zeros(d_hid))

    def build(self, g: Graph, x: Node, h: Node) -> Node:
        p = lambda nm: g.param_node(self.store, f"{self.prefix}.{nm}")
        r = g.sigmoid(g.add(g.add(g.matmul(x, p("wxr")), g.matmul(h, p("whr"))),
                            p("br")))
        u = g.sigmoid(g.add(g.add(g.matmul(x, p("wxu")), g.matmul(h, p("whu"))),
                            p("bu")))
        c = g.tanh(g.add(g.add(g.matmul(x, p("wxc")),
                               g.matmul(g.mul(r, h), p("whc"))), p("bc")))
        one_minus_u = g.add(g.scale(u, -1.0), g.const(1.0))
        return g.add(g.mul(u, h), g.mul(one_minus_u, c))


class SetEncoder:
    """Invariant per-set embedding + backwards-in-time recurrence -> posterior."""

    def __init__(self, store: Params, prefix: str, d: int, hidden,
                 gru_hidden: int, latent_dim: int, rng):
        self.store, self.prefix = store, prefix
        self.blocks, self.norms = [], []
        d_in = d
        for i, h in enumerate(hidden):
            self.blocks.append(_AffineSimple(store, f"{prefix}.phi{i}", d_in, h, rng))
            self.norms.append(LayerNorm(store, f"{prefix}.ln{i}", h))
            d_in = h
        self.emb_dim = d_in
        self.gru = GruCell(store, f"{prefix}.gru", d_in + 1, gru_hidden, rng)
        self.gru_hidden = gru_hidden
        self.head_mean = _AffineSimple(store, f"{prefix}.mean", gru_hidden,
                                       latent_dim, rng)
        self.head_std = _AffineSimple(store, f"{prefix}.prestd", gru_hidden,
                                      latent_dim, rng)

    def embed(self, g: Graph, x: Node) -> Node:
        h = x
        for blk, ln in zip(self.blocks, self.norms):
            h = g.relu(ln.build(g, blk.build(g, h)))
        return g.reduce_max(h, axis=1)

    def build(self, g: Graph, set_nodes: list[Node], times) -> tuple[Node, Node]:
        """Posterior (mean, pre_std) nodes; std = exp(pre_std)."""
        if not set_nodes:
            raise ValueError("cannot encode an empty series")
        b = set_nodes[0].value.shape[0]
        h = g.const(np.zeros((b, self.gru_hidden)))
        prev_t = times[-1]
        for i in range(len(set_nodes) - 1, -1, -1):
            emb = self.embed(g, set_nodes[i])
            dt = g.const(np.full((b, 1), float(prev_t - times[i])))
            h = self.gru.build(g, g.concat([emb, dt], axis=1), h)
            prev_t = times[i]
        return self.head_mean.build(g, h), self.head_std.build(g, h)


class LatentDynamics(GraphDynamics):
    """Autonomous tanh MLP for dz/dt in latent space, zero-initialized head."""

    def __init__(self, store: Params, prefix: str, latent_dim: int, hidden, rng):
        self.params = store
        self.layers = []
        d_in = latent_dim
        for i, h in enumerate(hidden):
            self.layers.append(_AffineSimple(store, f"{prefix}.{i}", d_in, h, rng))
            d_in = h
        self.out = _AffineSimple(store, f"{prefix}.out", d_in, latent_dim, rng,
                                 zero_init=True)

    def build(self, g: Graph, z: Node, t: float) -> Node:
        h = z
        for layer in self.layers:
            h = g.tanh(layer.build(g, h))
        return self.out.build(g, h)


class TemporalVae:
    """Encoder, latent ODE, and conditional set-flow decoder on one store."""

    def __init__(self, cfg: dict, rng=None):
        cfg = dict(cfg)
        self.d = cfg.get("d", 2)
        self.latent_dim = cfg.get("latent_dim", 8)
        self.flow_steps = cfg.get("flow_steps", 6)
        self.latent_steps = cfg.get("latent_steps", 4)
        self.cfg = cfg
        rng = rng or make_rng(cfg.get("init_seed", 0), "tvae-init")
        self.params = Params()
        self.encoder = SetEncoder(self.params, "enc", self.d,
                                  cfg.get("enc_hidden", [32, 64]),
                                  cfg.get("gru_hidden", 64),
                                  self.latent_dim, rng)
        self.latent_dyn = LatentDynamics(self.params, "lat", self.latent_dim,
                                         cfg.get("latent_hidden", [32, 32]), rng)
        widths = cfg.get("dec_hidden", [32, 32])
        dims = [self.d] + list(widths) + [self.d]
        layer_cfgs = [
            {"type": "concatsquash", "d_in": dims[i], "d_out": dims[i + 1],
             "activation": "tanh" if i < len(dims) - 2 else "identity"}
            for i in range(len(dims) - 1)
        ]
        dec_net = build_equivariant_net(self.params, "dec", layer_cfgs, rng,
                                        time_mode="none",
                                        cond_dim=self.latent_dim,
                                        zero_init_last=True)
        self.decoder = SetCnf(dec_net, self.params, self.d,
                              solver=SolverConfig(method="rk4",
                                                  steps=self.flow_steps))
        # value-path solver for latent transitions; looser tolerances are
        # fine here because latent trajectories are low-dimensional and smooth
        self.latent_solver = SolverConfig(method="dopri5", rtol=1e-3, atol=1e-4)

    # -- inference ----------------------------------------------------------

    def encode_series(self, series: np.ndarray, times) -> tuple[np.ndarray, np.ndarray]:
        """Posterior (mean, std) for a batch of series (B, T, n, d)."""
        g = Graph()
        nodes = [g.input(f"x{i}", series[:, i]) for i in range(series.shape[1])]
        mu, pre = self.encoder.build(g, nodes, np.asarray(times, dtype=float))
        return mu.value.copy(), np.exp(pre.value)

    def latent_transition(self, z0: np.ndarray, times) -> np.ndarray:
        """Latent states at requested times; z0 sits at reference time 0.

        Pure function of (z0, parameters, times): interpolation and
        extrapolation are just integration to the requested instants.
        """
        z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
        times = [float(t) for t in times]
        out = np.empty((z0.shape[0], len(times), self.latent_dim))
        order = np.argsort(times)
        fwd = [i for i in order if times[i] >= 0.0]
        bwd = [i for i in order[::-1] if times[i] < 0.0]
        for group in (fwd, bwd):
            t_cur, z_cur = 0.0, z0
            for i in group:
                t = times[i]
                if t != t_cur:
                    z_cur = integrate(self.latent_dyn, z_cur, t_cur, t,
                                      self.latent_solver).y1
                    t_cur = t
                out[:, i] = z_cur
        return out

    def decode_loglik(self, sets: np.ndarray, z_t: np.ndarray, t_phys: float,
                      solver: SolverConfig | None = None,
                      trace: TraceConfig | None = None, rng=None):
        """Conditional per-set log p(x_t | z_t) via the decoder flow."""
        return log_likelihood(self.decoder, sets, solver=solver, trace=trace,
                              rng=rng, cond=np.atleast_2d(z_t),
                              t_gate=float(t_phys))

    # -- training objective ---------------------------------------------------

    def build_elbo(self, g: Graph, series: np.ndarray, times, eps: np.ndarray,
                   probe_rng, kl_weight: float = 1.0,
                   trace_cfg: TraceConfig | None = None):
        """(elbo, recon, kl) scalar nodes for one batch of series.

        `eps` is the frozen reparameterization noise (B, latent_dim); the
        Hutchinson probes for each decode step come from `probe_rng`.
        """
        times = [float(t) for t in times]
        b, T = series.shape[0], series.shape[1]
        trace_cfg = trace_cfg or TraceConfig(mode="hutchinson", probes=1)
        set_nodes = [g.input(f"x{i}", series[:, i]) for i in range(T)]
        mu, pre = self.encoder.build(g, set_nodes, times)
        std = g.exp(pre)
        z = g.add(mu, g.mul(std, g.const(eps)))

        recon = None
        for i in range(T):
            if i > 0:
                z = rk4_chain(g, self.latent_dyn, z, times[i - 1], times[i],
                              self.latent_steps)
            logp = build_logp(g, self.decoder, set_nodes[i], self.flow_steps,
                              trace_cfg, probe_rng, cond=z, t_gate=times[i])
            term = g.reduce_mean(logp, axis=0)
            recon = term if recon is None else g.add(recon, term)

        mu2 = g.mul(mu, mu)
        kl_inner = g.add(g.add(mu2, g.exp(g.scale(pre, 2.0))),
                         g.add(g.scale(pre, -2.0), g.const(-1.0)))
        kl = g.scale(g.reduce_mean(g.reduce_sum(kl_inner, axis=1), axis=0), 0.5)
        elbo = g.sub(recon, g.scale(kl, kl_weight))
        return elbo, recon, kl

    def elbo(self, series: np.ndarray, times, rng, kl_weight: float = 1.0):
        """Single-sample ELBO estimate: (elbo, recon, kl) floats."""
        g = Graph()
        eps = rng.standard_normal((series.shape[0], self.latent_dim))
        e, r, k = self.build_elbo(g, series, times, eps, rng,
                                  kl_weight=kl_weight)
        vals = (float(e.value), float(r.value), float(k.value))
        if not all(np.isfinite(v) for v in vals):
            raise TrainingDiverged("non-finite ELBO component")
        return vals

    # -- generation -----------------------------------------------------------

    def sample_series(self, times, n: int, rng, count: int = 1,
                      z0: np.ndarray | None = None,
                      solver: SolverConfig | None = None) -> np.ndarray:
        """Sets sampled at arbitrary times: (count, T, n, d).

        Draws z_{t0} from the prior (or uses `z0`), evolves it with the
        latent ODE, then inverts the decoder flow on base noise at every
        requested time.
        """
        times = [float(t) for t in times]
        if z0 is None:
            z0 = rng.standard_normal((count, self.latent_dim))
        zs = self.latent_transition(z0, times)
        out = np.empty((count, len(times), n, self.d))
        for i, t in enumerate(times):
            out[:, i] = sample(self.decoder, n, count, rng, solver=solver,
                               cond=zs[:, i], t_gate=t)
        return out


def train_tvae(model: TemporalVae, train_series: np.ndarray, times,
               hyper: dict) -> dict:
    """Maximize the ELBO; reports per-epoch elbo/recon/kl.

    train_series: (N, T, n, d) with a shared time grid.
    """
    lr0 = hyper.get("lr", 1e-3)
    epochs = hyper.get("epochs", 60)
    batch = hyper.get("batch_size", 8)
    seed = hyper.get("seed", 0)
    kl_weight = hyper.get("kl_weight", 1.0)
    opt = Adam(model.params, lr=lr0)
    order_rng = make_rng(seed, "tvae-batches")
    noise_rng = make_rng(seed, "tvae-noise")
    history = []
    prev = None
    for epoch in range(epochs):
        opt.lr = decayed_lr(lr0, epoch, hyper.get("decay_factor", 0.5),
                            hyper.get("decay_every", 0))
        idx = order_rng.permutation(len(train_series))
        sums = np.zeros(3)
        nb = 0
        for start in range(0, len(idx), batch):
            sel = idx[start:start + batch]
            sb = train_series[sel]
            g = Graph()
            eps = noise_rng.standard_normal((len(sel), model.latent_dim))
            probe_rng = make_rng(seed, "tvae-probes", epoch, start)
            elbo, recon, kl = model.build_elbo(g, sb, times, eps, probe_rng,
                                               kl_weight=kl_weight)
            vals = (float(elbo.value), float(recon.value), float(kl.value))
            if not all(np.isfinite(v) for v in vals):
                raise TrainingDiverged(
                    f"non-finite ELBO at epoch {epoch} (lr={opt.lr:.3g})")
            loss = g.scale(elbo, -1.0)
            grads = g.param_grads(g.backward_from(np.ones(()), node=loss))
            opt.step(grads)
            sums += vals
            nb += 1
        mean_elbo, mean_recon, mean_kl = (sums / nb).tolist()
        history.append({"epoch": epoch, "elbo": mean_elbo,
                        "recon": mean_recon, "kl": mean_kl, "lr": opt.lr})
        if prev is not None and mean_elbo < prev - 10.0:
            raise TrainingDiverged(
                f"ELBO dropped by more than 10 nats at epoch {epoch}")
        prev = mean_elbo
    return {"epochs": history, "final_elbo": history[-1]["elbo"]}
