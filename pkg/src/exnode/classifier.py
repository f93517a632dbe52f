"""Permutation-invariant set classification.

Pipeline per the architecture: a per-element feature expansion, an
equivariant ODE solve over the expanded sets, max pooling across
elements, and a fully connected head with softmax.  Pooling after an
equivariant solve makes the logits invariant to element order.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Graph, Node, Params
from .errors import TrainingDiverged
from .layers import (LayerNorm, NetDynamics, as_set_batch,
                     build_equivariant_net, uniform_init)
from .ode import SolverConfig, rk4_chain
from .optim import Adam, decayed_lr
from .rng import make_rng


class _Affine:
    """y = x @ w + b applied per element (or per row for 2D inputs)."""

    def __init__(self, store: Params, prefix: str, d_in: int, d_out: int,
                 rng, zero_init: bool = False):
        self.store, self.prefix = store, prefix
        if zero_init:
            store.add(f"{prefix}.w", np.zeros((d_in, d_out)))
            store.add(f"{prefix}.b", np.zeros(d_out))
        else:
            store.add(f"{prefix}.w", uniform_init(rng, (d_in, d_out), d_in))
            store.add(f"{prefix}.b", uniform_init(rng, (d_out,), d_in))

    def build(self, g: Graph, x: Node) -> Node:
        w = g.param_node(self.store, f"{self.prefix}.w")
        b = g.param_node(self.store, f"{self.prefix}.b")
        return g.add(g.matmul(x, w), b)


class FeatureExpander:
    """Per-element expansion: either one affine map, or two
    affine+LayerNorm+tanh blocks (the conv-stack analogue)."""

    def __init__(self, store: Params, prefix: str, d_in: int, d_out: int,
                 rng, kind: str = "expander", hidden: int | None = None):
        if kind not in ("affine", "expander"):
            raise ValueError(f"unknown feature expansion kind {kind!r}")
        self.kind = kind
        if kind == "affine":
            self.blocks = [_Affine(store, f"{prefix}.0", d_in, d_out, rng)]
            self.norms = []
        else:
            h = hidden or d_out
            self.blocks = [_Affine(store, f"{prefix}.0", d_in, h, rng),
                           _Affine(store, f"{prefix}.1", h, d_out, rng)]
            self.norms = [LayerNorm(store, f"{prefix}.ln0", h),
                          LayerNorm(store, f"{prefix}.ln1", d_out)]

    def build(self, g: Graph, x: Node) -> Node:
        if self.kind == "affine":
            return self.blocks[0].build(g, x)
        h = x
        for blk, ln in zip(self.blocks, self.norms):
            h = g.tanh(ln.build(g, blk.build(g, h)))
        return h


class ClassifierModel:
    """Feature expander + equivariant ODE dynamics + max pool + FC head."""

    def __init__(self, cfg: dict, rng=None):
        cfg = dict(cfg)
        self.d_in = cfg.get("d_in", 2)
        self.d_h = cfg.get("d_h", 16)
        self.n_classes = cfg["n_classes"]
        self.head_width = cfg.get("head_width", self.d_h)
        self.solver = SolverConfig(method="rk4",
                                   steps=cfg.get("ode_steps", 8))
        self.cfg = cfg
        rng = rng or make_rng(cfg.get("init_seed", 0), "classifier-init")
        self.params = Params()
        self.fe = FeatureExpander(self.params, "fe", self.d_in, self.d_h, rng,
                                  kind=cfg.get("phi", "expander"))
        layer_cfgs = cfg.get("dynamics") or [
            {"type": "deepset", "d_in": self.d_h + 1, "d_out": self.d_h,
             "pool": "mean", "activation": "tanh"},
            {"type": "deepset", "d_in": self.d_h, "d_out": self.d_h,
             "pool": "mean", "activation": "identity"},
        ]
        self.net = build_equivariant_net(self.params, "dyn", layer_cfgs, rng,
                                         time_mode=cfg.get("time_mode", "concat"))
        self.head_fc = _Affine(self.params, "head.0", self.d_h,
                               self.head_width, rng)
        self.head_ln = LayerNorm(self.params, "head.ln", self.head_width)
        self.head_out = _Affine(self.params, "head.1", self.head_width,
                                self.n_classes, rng)

    def dynamics(self) -> NetDynamics:
        return NetDynamics(self.net, self.params)

    def build_logits(self, g: Graph, x: Node) -> Node:
        h = self.fe.build(g, x)
        h = rk4_chain(g, self.dynamics(), h, 0.0, 1.0, self.solver.steps)
        v = g.reduce_max(h, axis=1)
        hid = g.tanh(self.head_ln.build(g, self.head_fc.build(g, v)))
        return self.head_out.build(g, hid)


def classify_forward(model: ClassifierModel, sets: np.ndarray) -> np.ndarray:
    """Logits (batch, C); invariant to per-set element permutations."""
    sets = as_set_batch(sets)
    if sets.shape[2] != model.d_in:
        raise ValueError(f"model expects d={model.d_in}, got {sets.shape[2]}")
    g = Graph()
    return model.build_logits(g, g.input("x", sets)).value


def predict(model: ClassifierModel, sets: np.ndarray):
    """(class ids, softmax probabilities) for a batch of sets."""
    logits = classify_forward(model, sets)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    probs = e / e.sum(axis=1, keepdims=True)
    return np.argmax(logits, axis=1), probs


def _build_ce_loss(g: Graph, logits: Node, labels: np.ndarray,
                   n_classes: int) -> Node:
    b = labels.shape[0]
    onehot = np.zeros((b, n_classes))
    onehot[np.arange(b), labels] = 1.0
    m = g.tile(g.reduce_max(logits, axis=1), 1, n_classes)
    sh = g.sub(logits, m)
    lse = g.log(g.reduce_sum(g.exp(sh), axis=1))
    picked = g.reduce_sum(g.mul(sh, g.const(onehot)), axis=1)
    return g.reduce_mean(g.sub(lse, picked), axis=0)


def _stratified_batches(labels: np.ndarray, batch_size: int, rng):
    """Shuffle within each class, then interleave so batches stay balanced."""
    order = []
    per_class = [rng.permutation(np.where(labels == c)[0])
                 for c in np.unique(labels)]
    longest = max(len(p) for p in per_class)
    for i in range(longest):
        for p in per_class:
            if i < len(p):
                order.append(p[i])
    order = np.asarray(order)
    return [order[s:s + batch_size] for s in range(0, len(order), batch_size)]


def evaluate_classifier(model: ClassifierModel, sets, labels,
                        batch_size: int = 200):
    """(mean CE loss, accuracy, confusion matrix) on labeled sets."""
    total_loss = 0.0
    hits = 0
    conf = np.zeros((model.n_classes, model.n_classes), dtype=np.int64)
    for s in range(0, len(sets), batch_size):
        xb, yb = sets[s:s + batch_size], labels[s:s + batch_size]
        g = Graph()
        logits = model.build_logits(g, g.input("x", xb))
        loss = _build_ce_loss(g, logits, yb, model.n_classes)
        total_loss += float(loss.value) * len(yb)
        pred = np.argmax(logits.value, axis=1)
        hits += int(np.sum(pred == yb))
        for p, y in zip(pred, yb):
            conf[y, p] += 1
    n = len(sets)
    return total_loss / n, hits / n, conf


def train_classifier(model: ClassifierModel, train_data, val_data,
                     hyper: dict) -> dict:
    """Minimize softmax cross-entropy with Adam; early stop on val accuracy.

    train_data/val_data are (sets, labels) pairs.  The model is left at
    its best-validation parameters.  Report: per-epoch metrics plus the
    best epoch/accuracy.
    """
    train_sets, train_labels = train_data
    val_sets, val_labels = val_data
    lr0 = hyper.get("lr", 1e-3)
    epochs = hyper.get("epochs", 50)
    batch = hyper.get("batch_size", 100)
    seed = hyper.get("seed", 0)
    patience = hyper.get("patience", 10)
    target_acc = hyper.get("stop_at_val_acc")
    opt = Adam(model.params, lr=lr0)
    rng = make_rng(seed, "classifier-batches")

    history = []
    best = {"val_acc": -1.0, "epoch": -1, "params": None}
    stale = 0
    for epoch in range(epochs):
        opt.lr = decayed_lr(lr0, epoch, hyper.get("decay_factor", 0.5),
                            hyper.get("decay_every", 0))
        epoch_loss, epoch_hits, seen = 0.0, 0, 0
        for sel in _stratified_batches(train_labels, batch, rng):
            xb, yb = train_sets[sel], train_labels[sel]
            g = Graph()
            logits = model.build_logits(g, g.input("x", xb))
            loss = _build_ce_loss(g, logits, yb, model.n_classes)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} (lr={opt.lr:.3g})")
            grads = g.param_grads(g.backward_from(np.ones(()), node=loss))
            opt.step(grads)
            epoch_loss += loss_val * len(yb)
            epoch_hits += int(np.sum(np.argmax(logits.value, axis=1) == yb))
            seen += len(yb)
        val_loss, val_acc, _ = evaluate_classifier(model, val_sets, val_labels)
        history.append({"epoch": epoch, "train_loss": epoch_loss / seen,
                        "train_acc": epoch_hits / seen,
                        "val_loss": val_loss, "val_acc": val_acc})
        if val_acc > best["val_acc"]:
            best = {"val_acc": val_acc, "epoch": epoch,
                    "params": model.params.copy()}
            stale = 0
        else:
            stale += 1
        if stale > patience:
            break
        if target_acc is not None and val_acc >= target_acc:
            break
    if best["params"] is not None:
        for name in model.params.names():
            model.params.set(name, best["params"][name])
    return {"epochs": history, "best_val_acc": best["val_acc"],
            "best_epoch": best["epoch"]}
