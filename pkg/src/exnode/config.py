"""Run-configuration schema, strict validation, and model/data builders.

Configs are plain JSON with four sections (model, solver, data, optim)
under a task tag.  Validation is strict: unknown keys are rejected with
the offending path named, so a typo'd hyperparameter can never silently
fall back to a default.
"""

from __future__ import annotations

import hashlib
import json

from .autodiff import Params
from .classifier import ClassifierModel
from .cnf import SetCnf, TraceConfig
from .datagen import (MixtureSpec, RotatingSeriesSpec, gen_class_dataset,
                      gen_density_sets, gen_rotating_series)
from .errors import CheckpointError, ConfigError
from .layers import build_equivariant_net
from .ode import SolverConfig
from .rng import make_rng
from .tvae import TemporalVae

TASKS = ("classify", "cnf", "tvae")

_SOLVER_KEYS = {"method", "steps", "rtol", "atol", "max_steps"}
_TRACE_KEYS = {"mode", "probe", "probes", "exact_cap", "auto_probes"}
_OPTIM_KEYS = {"lr", "epochs", "batch_size", "seed", "patience",
               "decay_every", "decay_factor", "stop_at_val_acc", "steps",
               "kl_weight", "trace"}
_MODEL_KEYS = {
    "classify": {"d_in", "d_h", "n_classes", "phi", "head_width",
                 "ode_steps", "dynamics", "time_mode", "init_seed"},
    "cnf": {"d", "dynamics", "time_mode", "flavor", "hidden", "init_seed"},
    "tvae": {"d", "latent_dim", "enc_hidden", "gru_hidden", "dec_hidden",
             "latent_hidden", "flow_steps", "latent_steps", "init_seed"},
}
_DATA_KEYS = {
    "classify": {"kind", "families", "train_per_class", "val_per_class",
                 "n", "noise", "seed"},
    "cnf": {"kind", "mixture", "train_count", "val_count", "test_count",
            "n", "seed", "path"},
    "tvae": {"kind", "rotating", "train_count", "seed", "path"},
}
_TOP_KEYS = {"task", "seed", "model", "solver", "data", "optim", "out_dir"}


def _reject_unknown(section: dict, allowed: set, where: str):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {where}.{key!r}")


def validate_config(cfg: dict) -> dict:
    """Validate and return the config (with the task-level defaults set)."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(cfg, _TOP_KEYS, "config")
    task = cfg.get("task")
    if task not in TASKS:
        raise ConfigError(f"config.task must be one of {TASKS}, got {task!r}")
    for section in ("model", "data"):
        if section not in cfg or not isinstance(cfg[section], dict):
            raise ConfigError(f"config.{section} section is required")
    cfg.setdefault("solver", {})
    cfg.setdefault("optim", {})
    cfg.setdefault("seed", 0)
    _reject_unknown(cfg["model"], _MODEL_KEYS[task], "model")
    _reject_unknown(cfg["solver"], _SOLVER_KEYS, "solver")
    _reject_unknown(cfg["data"], _DATA_KEYS[task], "data")
    _reject_unknown(cfg["optim"], _OPTIM_KEYS, "optim")
    if isinstance(cfg["optim"].get("trace"), dict):
        _reject_unknown(cfg["optim"]["trace"], _TRACE_KEYS, "optim.trace")
    try:
        solver_config(cfg["solver"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"solver: {exc}") from exc
    kind = cfg["data"].get("kind")
    expected = {"classify": ("families",), "cnf": ("mixture", "jsonl"),
                "tvae": ("rotating", "jsonl")}[task]
    if kind not in expected:
        raise ConfigError(
            f"data.kind must be one of {expected} for task {task!r}, "
            f"got {kind!r}")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    except OSError as exc:
        raise ConfigError(str(exc)) from exc
    return validate_config(cfg)


def config_hash(cfg: dict, seed: int) -> str:
    blob = json.dumps({"config": cfg, "seed": seed}, sort_keys=True,
                      separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def solver_config(section: dict) -> SolverConfig:
    return SolverConfig(**section)


def trace_config(section) -> TraceConfig:
    if section is None:
        return TraceConfig(mode="hutchinson", probes=1)
    return TraceConfig(**section)


# ---------------------------------------------------------------------------
# model builders
# ---------------------------------------------------------------------------

def _default_cnf_layers(d: int, flavor: str, hidden) -> tuple[list, str]:
    hidden = list(hidden or [24, 24])
    if flavor == "concatsquash":
        dims = [d] + hidden + [d]
        cfgs = [{"type": "concatsquash", "d_in": dims[i], "d_out": dims[i + 1],
                 "activation": "tanh" if i < len(dims) - 2 else "identity"}
                for i in range(len(dims) - 1)]
        return cfgs, "none"
    if flavor == "deepset":
        dims = [d + 1] + hidden + [d]
        cfgs = [{"type": "deepset", "d_in": dims[i], "d_out": dims[i + 1],
                 "pool": "mean",
                 "activation": "tanh" if i < len(dims) - 2 else "identity"}
                for i in range(len(dims) - 1)]
        return cfgs, "concat"
    if flavor == "attention":
        cfgs = [{"type": "attention", "d_in": d + 1,
                 "d_h": hidden[0], "d_out": d}]
        return cfgs, "concat"
    raise ConfigError(f"unknown cnf dynamics flavor {flavor!r}")


def build_cnf_model(model_cfg: dict, solver: SolverConfig, seed: int) -> SetCnf:
    d = model_cfg.get("d", 2)
    rng = make_rng(model_cfg.get("init_seed", seed), "cnf-init")
    store = Params()
    if "dynamics" in model_cfg:
        cfgs = model_cfg["dynamics"]
        time_mode = model_cfg.get("time_mode", "none")
    else:
        cfgs, time_mode = _default_cnf_layers(
            d, model_cfg.get("flavor", "concatsquash"),
            model_cfg.get("hidden"))
    net = build_equivariant_net(store, "flow", cfgs, rng, time_mode=time_mode)
    return SetCnf(net, store, d, solver=solver)


def build_model(task: str, model_cfg: dict, solver: SolverConfig, seed: int):
    if task == "classify":
        cfg = dict(model_cfg)
        cfg.setdefault("init_seed", seed)
        if solver.method == "rk4":
            cfg.setdefault("ode_steps", solver.steps)
        return ClassifierModel(cfg)
    if task == "cnf":
        return build_cnf_model(model_cfg, solver, seed)
    if task == "tvae":
        cfg = dict(model_cfg)
        cfg.setdefault("init_seed", seed)
        return TemporalVae(cfg)
    raise ConfigError(f"unknown task {task!r}")


def model_params(task: str, model) -> Params:
    return model.params


def save_checkpoint(path, task: str, model, model_cfg: dict, seed: int,
                    extra_meta: dict | None = None) -> None:
    meta = {"task": task, "model": model_cfg, "seed": seed}
    if extra_meta:
        meta.update(extra_meta)
    model.params.save(path, meta=meta)


def load_checkpoint(path):
    """Rebuild the model recorded in a checkpoint and load its weights."""
    loaded, meta = Params.load(path)
    task = meta.get("task")
    if task not in TASKS:
        raise CheckpointError(f"checkpoint carries unknown task {task!r}")
    solver = solver_config(meta.get("solver", {}))
    model = build_model(task, meta.get("model", {}), solver, meta.get("seed", 0))
    want = set(model.params.names())
    have = set(loaded.names())
    if want != have:
        missing = sorted(want - have)[:3]
        surplus = sorted(have - want)[:3]
        raise CheckpointError(
            f"checkpoint parameters do not match the recorded architecture "
            f"(missing {missing}, surplus {surplus})")
    for name in loaded.names():
        model.params.set(name, loaded[name])
    return task, model, meta


# ---------------------------------------------------------------------------
# data builders
# ---------------------------------------------------------------------------

def build_classify_data(data_cfg: dict, seed: int):
    fams = data_cfg.get("families", ["ring", "cross", "gaussian-blobs"])
    n = data_cfg.get("n", 64)
    noise = data_cfg.get("noise", 0.08)
    dseed = data_cfg.get("seed", seed)
    train = gen_class_dataset(fams, data_cfg.get("train_per_class", 667),
                              n, dseed, noise)
    val = gen_class_dataset(fams, data_cfg.get("val_per_class", 167),
                            n, dseed + 10_000, noise)
    return train, val


def build_cnf_data(data_cfg: dict, seed: int):
    spec = MixtureSpec.from_dict(data_cfg["mixture"]) \
        if "mixture" in data_cfg else MixtureSpec()
    n = data_cfg.get("n", 64)
    dseed = data_cfg.get("seed", seed)
    train, _ = gen_density_sets(spec, data_cfg.get("train_count", 960), n, dseed)
    val, _ = gen_density_sets(spec, data_cfg.get("val_count", 200), n,
                              dseed + 10_000)
    test, gold = gen_density_sets(spec, data_cfg.get("test_count", 300), n,
                                  dseed + 20_000)
    return {"spec": spec, "train": train, "val": val, "test": test,
            "gold_ppll": gold}


def build_tvae_data(data_cfg: dict, seed: int):
    spec = RotatingSeriesSpec.from_dict(data_cfg["rotating"]) \
        if "rotating" in data_cfg else RotatingSeriesSpec()
    dseed = data_cfg.get("seed", seed)
    times, series = gen_rotating_series(spec, data_cfg.get("train_count", 200),
                                        dseed)
    return {"spec": spec, "times": times, "series": series}
