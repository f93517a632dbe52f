"""Deterministic synthetic set data: classifiable 2D shape families,
Gaussian-mixture densities with exact per-point log-likelihood, and
rotating temporal set series.

Every generator is a pure function of its seed via the Philox streams in
:mod:`exnode.rng`, so datasets regenerate identically from a recorded
(spec, seed) manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .rng import make_rng

CLASS_FAMILIES = ("ring", "cross", "two-moons", "gaussian-blobs")


# ---------------------------------------------------------------------------
# classifiable shape families
# ---------------------------------------------------------------------------

def _ring(rng, n, noise):
    # grid angles + random offset: noise-free rings are exactly centered
    theta = rng.uniform(0.0, 2 * np.pi) + 2 * np.pi * np.arange(n) / n
    r = 1.0 + noise * rng.standard_normal(n)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def _cross(rng, n, noise):
    u = rng.uniform(-1.0, 1.0, size=n)
    horiz = rng.integers(0, 2, size=n).astype(bool)
    pts = np.where(horiz[:, None],
                   np.stack([u, np.zeros(n)], axis=1),
                   np.stack([np.zeros(n), u], axis=1))
    return pts + noise * rng.standard_normal((n, 2))


def _two_moons(rng, n, noise):
    t = rng.uniform(0.0, np.pi, size=n)
    lower = rng.integers(0, 2, size=n).astype(bool)
    x = np.where(lower, 1.0 - np.cos(t), np.cos(t))
    y = np.where(lower, 0.5 - np.sin(t), np.sin(t))
    pts = np.stack([x - 0.5, y - 0.25], axis=1)
    return pts + noise * rng.standard_normal((n, 2))


def _blobs(rng, n, noise, modes=4, radius=0.9):
    angles = 2 * np.pi * np.arange(modes) / modes + np.pi / modes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    which = rng.integers(0, modes, size=n)
    return centers[which] + noise * rng.standard_normal((n, 2))


_FAMILY_FNS = {
    "ring": _ring,
    "cross": _cross,
    "two-moons": _two_moons,
    "gaussian-blobs": _blobs,
}


def gen_family_sets(family: str, count: int, n: int, seed: int,
                    noise: float = 0.08) -> np.ndarray:
    """`count` sets of `n` 2D points drawn from one shape family."""
    if family not in _FAMILY_FNS:
        raise ValueError(f"unknown shape family {family!r}; "
                         f"choose from {CLASS_FAMILIES}")
    if n < 4:
        raise ValueError("need n >= 4 points per set")
    fn = _FAMILY_FNS[family]
    rng = make_rng(seed, "family", family, n)
    return np.stack([fn(rng, n, noise) for _ in range(count)])


def gen_class_dataset(families, count_per_class: int, n: int, seed: int,
                      noise: float = 0.08):
    """Balanced labeled dataset over several families; labels = family index."""
    sets, labels = [], []
    for cid, fam in enumerate(families):
        sets.append(gen_family_sets(fam, count_per_class, n, seed + cid, noise))
        labels.append(np.full(count_per_class, cid, dtype=np.int64))
    sets = np.concatenate(sets)
    labels = np.concatenate(labels)
    order = make_rng(seed, "class-shuffle").permutation(len(labels))
    return sets[order], labels[order]


# ---------------------------------------------------------------------------
# Gaussian mixtures with exact log-density
# ---------------------------------------------------------------------------

@dataclass
class MixtureSpec:
    """Isotropic Gaussian mixture in 2D (the density-estimation target)."""

    weights: tuple = (0.25, 0.25, 0.25, 0.25)
    means: tuple = ((-1.2, -1.2), (-1.2, 1.2), (1.2, -1.2), (1.2, 1.2))
    stds: tuple = (0.4, 0.4, 0.4, 0.4)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")

    def to_dict(self):
        return {"weights": list(self.weights),
                "means": [list(m) for m in self.means],
                "stds": list(self.stds)}

    @staticmethod
    def from_dict(d):
        return MixtureSpec(tuple(d["weights"]),
                           tuple(tuple(m) for m in d["means"]),
                           tuple(d["stds"]))


def mixture_logpdf(spec: MixtureSpec, pts: np.ndarray) -> np.ndarray:
    """Exact log-density of the mixture at each point (.., 2) -> (..,)."""
    pts = np.asarray(pts, dtype=np.float64)
    comps = []
    for w, m, s in zip(spec.weights, spec.means, spec.stds):
        if w == 0.0:
            continue
        dev = pts - np.asarray(m)
        q = np.sum(dev * dev, axis=-1) / (s * s)
        comps.append(np.log(w) - np.log(2 * np.pi * s * s) - 0.5 * q)
    stacked = np.stack(comps, axis=0)
    m = np.max(stacked, axis=0)
    return m + np.log(np.sum(np.exp(stacked - m), axis=0))


def gen_density_sets(spec: MixtureSpec, count: int, n: int, seed: int):
    """Sets of i.i.d. mixture draws plus their exact per-point log-likelihood.

    Returns (sets (count, n, 2), ppll) where ppll is the analytic
    generator log-density averaged over every generated point: the gold
    reference any density model is compared against.
    """
    rng = make_rng(seed, "mixture", n)
    w = np.asarray(spec.weights)
    means = np.asarray(spec.means)
    stds = np.asarray(spec.stds)
    which = rng.choice(len(w), size=(count, n), p=w)
    pts = means[which] + stds[which][..., None] * rng.standard_normal((count, n, 2))
    ppll = float(np.mean(mixture_logpdf(spec, pts)))
    return pts, ppll


def gaussian_mle_ppll(train_pts: np.ndarray, test_pts: np.ndarray) -> float:
    """Per-point log-likelihood of test points under the single-Gaussian
    maximum-likelihood fit of the training points (the i.i.d. baseline)."""
    x = train_pts.reshape(-1, train_pts.shape[-1])
    mu = x.mean(axis=0)
    cov = np.cov(x.T, bias=True)
    d = x.shape[1]
    prec = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    dev = test_pts.reshape(-1, d) - mu
    q = np.einsum("ij,jk,ik->i", dev, prec, dev)
    ll = -0.5 * (d * np.log(2 * np.pi) + logdet + q)
    return float(np.mean(ll))


# ---------------------------------------------------------------------------
# rotating temporal series
# ---------------------------------------------------------------------------

@dataclass
class RotatingSeriesSpec:
    """Clockwise rotation of a fixed template shape at constant speed.

    The rotation angle at time t is exactly -omega * t.  The template is
    an asymmetric two-blob arrangement so the pose is unambiguous over a
    full turn.
    """

    omega: float = np.pi / 2
    times: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    n: int = 32
    template_size: int = 32
    noise: float = 0.03
    template_seed: int = 7

    def to_dict(self):
        return {"omega": self.omega, "times": list(self.times), "n": self.n,
                "template_size": self.template_size, "noise": self.noise,
                "template_seed": self.template_seed}

    @staticmethod
    def from_dict(d):
        return RotatingSeriesSpec(d["omega"], tuple(d["times"]), d["n"],
                                  d["template_size"], d["noise"],
                                  d["template_seed"])


def series_template(spec: RotatingSeriesSpec) -> np.ndarray:
    """Deterministic base shape: a large blob off-axis plus a small one."""
    rng = make_rng(spec.template_seed, "template", spec.template_size)
    n_a = (spec.template_size * 3) // 4
    a = np.array([1.0, 0.0]) + 0.18 * rng.standard_normal((n_a, 2))
    b = np.array([0.0, 0.45]) + 0.10 * rng.standard_normal(
        (spec.template_size - n_a, 2))
    return np.concatenate([a, b])


def rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def series_angle(spec: RotatingSeriesSpec, t: float) -> float:
    return -spec.omega * t


def gen_rotating_series(spec: RotatingSeriesSpec, count: int, seed: int):
    """Batch of temporal series: (times, sets (count, T, n, 2)).

    Template points are freshly subsampled at every time step, then
    rotated by -omega*t and jittered.  At noise 0 with n equal to the
    template size, each step is an exact rotated permutation of the
    template.
    """
    if len(spec.times) == 0:
        raise ValueError("empty time grid")
    template = series_template(spec)
    rng = make_rng(seed, "rotating", count, spec.n)
    out = np.empty((count, len(spec.times), spec.n, 2))
    for c in range(count):
        for ti, t in enumerate(spec.times):
            idx = rng.permutation(spec.template_size)[:spec.n]
            pts = template[idx] @ rotation(series_angle(spec, t)).T
            out[c, ti] = pts + spec.noise * rng.standard_normal((spec.n, 2))
    return np.asarray(spec.times, dtype=np.float64), out


# ---------------------------------------------------------------------------
# Procrustes rotation probe
# ---------------------------------------------------------------------------

def procrustes_angle(source: np.ndarray, target: np.ndarray,
                     refine_iters: int = 4, coarse: int = 90) -> float:
    """Rotation angle about the origin that best maps `source` onto `target`.

    Point sets are unordered, so correspondence is recovered jointly
    with the angle: a coarse scan of candidate angles scored by
    nearest-neighbor distance, then alternating optimal assignment
    (Hungarian) with the closed-form least-squares angle.  Exact when
    `target` is a rotated permutation of `source`.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)

    def nn_cost(angle):
        rot = src @ rotation(angle).T
        d2 = np.sum((rot[:, None, :] - tgt[None, :, :]) ** 2, axis=2)
        return float(np.sum(np.min(d2, axis=1)))

    grid = np.linspace(-np.pi, np.pi, coarse, endpoint=False)
    best = min(grid, key=nn_cost)

    angle = best
    for _ in range(refine_iters):
        rot = src @ rotation(angle).T
        d2 = np.sum((rot[:, None, :] - tgt[None, :, :]) ** 2, axis=2)
        rows, cols = linear_sum_assignment(d2)
        a, b = src[rows], tgt[cols]
        # closed-form least-squares rotation for matched pairs
        angle = float(np.arctan2(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]),
                                 np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])))
    return angle


def angle_difference(a: float, b: float) -> float:
    """Signed smallest difference a - b wrapped to (-pi, pi]."""
    d = (a - b + np.pi) % (2 * np.pi) - np.pi
    return float(d)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_sets_jsonl(path, sets: np.ndarray, times=None) -> None:
    """One JSON object per set: {"t": time or null, "points": [[x, y], ...]}."""
    with open(path, "w") as fh:
        for i, s in enumerate(sets):
            t = None if times is None else float(times[i])
            fh.write(json.dumps({"t": t, "points": np.asarray(s).tolist()}))
            fh.write("\n")


def read_sets_jsonl(path):
    sets, times = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            sets.append(np.asarray(doc["points"], dtype=np.float64))
            times.append(doc.get("t"))
    return sets, times


def write_series_jsonl(path, times: np.ndarray, series: np.ndarray) -> None:
    """One JSON object per series: {"times": [...], "sets": [[[x, y], ...], ...]}."""
    with open(path, "w") as fh:
        for s in series:
            fh.write(json.dumps({"times": np.asarray(times).tolist(),
                                 "sets": np.asarray(s).tolist()}))
            fh.write("\n")


def read_series_jsonl(path):
    all_times, all_series = [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            all_times.append(np.asarray(doc["times"], dtype=np.float64))
            all_series.append(np.asarray(doc["sets"], dtype=np.float64))
    return all_times, all_series


def write_manifest(path, kind: str, spec: dict, seed: int) -> None:
    with open(path, "w") as fh:
        json.dump({"kind": kind, "spec": spec, "seed": seed}, fh, indent=2)
