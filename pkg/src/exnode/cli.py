"""Command-line entry point: train, eval, sample, check.

All commands are deterministic given (config, seed): reruns regenerate
identical metrics and artifacts except the wall-clock fields recorded in
run.json.  Exit codes: 0 success, 2 configuration/flag errors, 3
training divergence, 1 failed property checks.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checks, config as cfgmod
from .classifier import evaluate_classifier, train_classifier
from .cnf import TraceConfig, log_likelihood, sample, train_cnf
from .datagen import (read_series_jsonl, read_sets_jsonl, write_manifest,
                      write_series_jsonl, write_sets_jsonl)
from .errors import CheckpointError, ConfigError, ExnodeError, TrainingDiverged
from .kernels import active_backend
from .rng import make_rng
from .tvae import train_tvae


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    return max(1, int(os.environ.get("EXNODE_THREADS", "1")))


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_metrics_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow(row)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _train_once(cfg: dict, seed: int, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    task = cfg["task"]
    solver = cfgmod.solver_config(cfg["solver"])
    optim = dict(cfg["optim"])
    optim["seed"] = seed
    t0 = time.time()
    model = cfgmod.build_model(task, cfg["model"], solver, seed)
    report = None

    if task == "classify":
        train, val = cfgmod.build_classify_data(cfg["data"], seed)
        report = train_classifier(model, train, val, optim)
        rows = []
        for h in report["epochs"]:
            rows.append([h["epoch"], "train", h["train_loss"], h["train_acc"]])
            rows.append([h["epoch"], "val", h["val_loss"], h["val_acc"]])
        _write_metrics_csv(out_dir / "metrics.csv", rows,
                           ["epoch", "split", "loss", "accuracy"])
        headline = {"metric": "val_accuracy", "value": report["best_val_acc"]}
    elif task == "cnf":
        data = cfgmod.build_cnf_data(cfg["data"], seed)
        optim.setdefault("trace", None)
        optim["trace"] = cfgmod.trace_config(optim["trace"])
        report = train_cnf(model, data["train"], data["val"], optim)
        rows = []
        for h in report["epochs"]:
            rows.append([h["epoch"], "train", h["train_ppll"]])
            rows.append([h["epoch"], "val", h["val_ppll"]])
        _write_metrics_csv(out_dir / "metrics.csv", rows,
                           ["epoch", "split", "ppll"])
        headline = {"metric": "val_ppll", "value": report["final_val_ppll"],
                    "gold_ppll": data["gold_ppll"]}
    else:
        data = cfgmod.build_tvae_data(cfg["data"], seed)
        report = train_tvae(model, data["series"], data["times"], optim)
        rows = [[h["epoch"], h["elbo"], h["recon"], h["kl"]]
                for h in report["epochs"]]
        _write_metrics_csv(out_dir / "metrics.csv", rows,
                           ["epoch", "elbo", "recon", "kl"])
        headline = {"metric": "elbo", "value": report["final_elbo"]}

    cfgmod.save_checkpoint(
        out_dir / "checkpoint.json", task, model, cfg["model"], seed,
        extra_meta={"solver": cfg["solver"], "data": cfg["data"]})
    write_manifest(out_dir / "dataset.json", cfg["data"].get("kind", ""),
                   cfg["data"], seed)
    _write_json(out_dir / "report.json", report)
    run_doc = {
        "config": cfg,
        "seed": seed,
        "config_hash": cfgmod.config_hash(cfg, seed),
        "task": task,
        "headline": headline,
        "kernel_backend": active_backend(),
        "wall_time_s": time.time() - t0,
    }
    _write_json(out_dir / "run.json", run_doc)
    return headline


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config)
    out_root = Path(args.out or cfg.get("out_dir") or "runs")
    base_seed = int(cfg.get("seed", 0))
    if args.seeds and args.seeds > 1:
        values = []
        for k in range(args.seeds):
            seed = base_seed + k
            headline = _train_once(cfg, seed, out_root / f"seed{seed}")
            values.append(headline["value"])
            print(f"seed {seed}: {headline['metric']} = {headline['value']:.4f}")
        summary = {
            "metric": headline["metric"],
            "seeds": [base_seed + k for k in range(args.seeds)],
            "values": values,
            "mean": float(np.mean(values)),
            "std": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
        }
        _write_json(out_root / "summary.json", summary)
        print(f"{summary['metric']}: {summary['mean']:.4f} "
              f"+/- {summary['std']:.4f} over {args.seeds} seeds")
    else:
        headline = _train_once(cfg, base_seed, out_root)
        print(f"{headline['metric']} = {headline['value']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _eval_cnf_ppll(model, sets: np.ndarray, solver, threads: int):
    trace = TraceConfig(mode="auto")
    chunks = np.array_split(np.arange(len(sets)), max(1, threads * 2)) \
        if threads > 1 else [np.arange(len(sets))]
    chunks = [c for c in chunks if len(c)]

    def work(idx):
        rng = make_rng(0, "eval-probes", int(idx[0]))
        lp, _ = log_likelihood(model, sets[idx], solver=solver, trace=trace,
                               rng=rng)
        return lp

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    logp = np.concatenate(parts)
    total_points = sets.shape[0] * sets.shape[1]
    return float(np.sum(logp) / total_points), len(sets), total_points


def cmd_eval(args) -> int:
    task, model, meta = cfgmod.load_checkpoint(args.ckpt)
    solver = cfgmod.solver_config(meta.get("solver", {}))
    threads = _threads(args)
    data_path = Path(args.data) if args.data else None

    if task == "classify":
        if data_path is not None and data_path.suffix == ".jsonl":
            raise ConfigError("classify eval needs a config .json with a "
                              "labeled data section, not a .jsonl point file")
        data_cfg = _data_section(data_path, meta, expected_kind="families")
        _, (val_sets, val_labels) = cfgmod.build_classify_data(
            data_cfg, meta.get("seed", 0))
        loss, acc, conf = evaluate_classifier(model, val_sets, val_labels)
        doc = {"task": task, "accuracy": acc, "loss": loss,
               "confusion": conf.tolist(), "count": int(conf.sum())}
    elif task == "cnf":
        if data_path is not None and data_path.suffix == ".jsonl":
            raw, _ = read_sets_jsonl(data_path)
            sets = np.stack(raw)
        else:
            data_cfg = _data_section(data_path, meta, expected_kind="mixture")
            sets = cfgmod.build_cnf_data(data_cfg, meta.get("seed", 0))["test"]
        ppll, count, points = _eval_cnf_ppll(model, sets, solver, threads)
        doc = {"task": task, "ppll": ppll, "count": count,
               "total_points": points}
    else:
        if data_path is not None and data_path.suffix == ".jsonl":
            all_times, all_series = read_series_jsonl(data_path)
            times = all_times[0]
            series = np.stack(all_series)
        else:
            data_cfg = _data_section(data_path, meta, expected_kind="rotating")
            data = cfgmod.build_tvae_data(data_cfg, meta.get("seed", 0))
            times, series = data["times"], data["series"]
        total, points = 0.0, 0
        for b in range(0, len(series), 16):
            sb = series[b:b + 16]
            mu, _ = model.encode_series(sb, times)
            zs = model.latent_transition(mu, times)
            for i, t in enumerate(times):
                lp, _ = model.decode_loglik(sb[:, i], zs[:, i], float(t))
                total += float(np.sum(lp))
                points += sb.shape[0] * sb.shape[2]
        doc = {"task": task, "recon_ppll": total / points,
               "count": int(len(series)), "total_points": points}

    if args.out:
        _write_json(args.out, doc)
    print(json.dumps(doc))
    return 0


def _data_section(path: Path | None, meta: dict, expected_kind: str) -> dict:
    if path is None:
        data_cfg = meta.get("data")
        if not data_cfg:
            raise ConfigError("no --data given and checkpoint has no "
                              "recorded data section")
    else:
        with open(path) as fh:
            doc = json.load(fh)
        data_cfg = doc.get("data", doc)
    kind = data_cfg.get("kind", expected_kind)
    if kind != expected_kind:
        raise ConfigError(
            f"checkpoint task expects data kind {expected_kind!r}, "
            f"got {kind!r}")
    return data_cfg


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------

def cmd_sample(args) -> int:
    task, model, meta = cfgmod.load_checkpoint(args.ckpt)
    if not args.out:
        raise ConfigError("--out FILE is required for sample")
    rng = make_rng(args.seed, "cli-sample")
    if task == "cnf":
        solver = cfgmod.solver_config(meta.get("solver", {}))
        sets = sample(model, args.n, args.count, rng, solver=solver)
        write_sets_jsonl(args.out, sets)
    elif task == "tvae":
        if args.times:
            times = [float(x) for x in args.times.split(",")]
        else:
            times = list(meta.get("data", {}).get(
                "rotating", {}).get("times", (0.0, 0.25, 0.5, 0.75, 1.0)))
        series = model.sample_series(times, args.n, rng, count=args.count)
        write_series_jsonl(args.out, np.asarray(times), series)
    else:
        raise ConfigError(f"task {task!r} checkpoints do not support sample")
    print(f"wrote {args.count} samples to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------

def cmd_check(args) -> int:
    try:
        report = checks.run_suite(args.suite, seed=args.seed,
                                  sabotage=args.sabotage, fast=args.fast)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report, indent=2))
    return 0 if report["passed"] else 1


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="exnode",
        description="Equivariant neural ODEs for sets: train, evaluate, "
                    "sample, and verify.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("-c", "--config", required=True)
    t.add_argument("--out", help="output directory (overrides config out_dir)")
    t.add_argument("--seeds", type=int, default=1,
                   help="run this many seeds and write mean/std summary")
    t.add_argument("--threads", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on data")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", help=".jsonl data file or .json config")
    e.add_argument("--out", help="write metrics JSON here")
    e.add_argument("--threads", type=int)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sample", help="sample from a trained checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=64, help="points per set")
    s.add_argument("--count", type=int, default=8, help="number of samples")
    s.add_argument("--times", help="comma-separated times (tvae only)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    c = sub.add_parser("check", help="run a property-check suite")
    c.add_argument("--suite", required=True,
                   choices=sorted(checks.SUITES))
    c.add_argument("--sabotage", action="store_true",
                   help="inject an equivariance bug (negative control)")
    c.add_argument("--fast", action="store_true",
                   help="smaller sample counts for a quick pass")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(fn=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except ExnodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
