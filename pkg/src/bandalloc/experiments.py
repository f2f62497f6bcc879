"""Experiment recipes behind the CLI: config handling and the runners.

Each runner reproduces one of the published experiment shapes at desk
scale and writes delimited results (plus figures) under one output
directory. All randomness flows from the single --seed; rerunning a
command with the same config and seed yields byte-identical CSVs apart
from the wall-time column.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .allocation import (
    OpCounters,
    allocate_iterative,
    estimate_complexity,
    schedule_users,
)
from .channel import (
    FINE_TUNE_EVAL_TASK,
    ChannelSample,
    QosKind,
    SmallScaleModel,
    TaskFamily,
    TaskSpec,
)
from .gnn import FnnArchitecture, forward, init_params, load_params, save_params
from .learning import (
    POOL_EVAL,
    MetaConfig,
    TaskRuntime,
    TrainConfig,
    TrainLog,
    baseline_mtl_pretrain,
    eval_mean_reward,
    meta_test,
    meta_train,
    oracle_mean_reward,
    robustness_sweep,
    train_task,
)
from .numerics import STREAM_PARAMS, RngStream
RESULT_HEADER = ("experiment_id", "task", "method", "epoch",
                 "mean_sum_reward_bps", "gap_to_oracle_pct",
                 "objective_evals", "fnn_multiplies", "scheduling_ops",
                 "wall_ms")

ALLOCATION_HEADER = ("sample_index", "user_index", "w_min_hz", "w_hz",
                     "reward_bps")


def worker_count() -> int:
    env = os.environ.get("BANDALLOC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parallel_map(fn, items):
    """Order-preserving map over a bounded worker pool."""
    items = list(items)
    workers = min(worker_count(), len(items)) if items else 1
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


@dataclass
class ResultRow:
    experiment_id: str
    task: str
    method: str
    epoch: int
    mean_sum_reward_bps: float
    gap_to_oracle_pct: Optional[float] = None
    objective_evals: int = 0
    fnn_multiplies: int = 0
    scheduling_ops: int = 0
    wall_ms: float = 0.0

    def as_tuple(self):
        return (self.experiment_id, self.task, self.method, self.epoch,
                self.mean_sum_reward_bps, self.gap_to_oracle_pct,
                self.objective_evals, self.fnn_multiplies,
                self.scheduling_ops, self.wall_ms)


def gap_pct(oracle: float, value: float) -> Optional[float]:
    if oracle == 0.0:
        return None
    return 100.0 * (oracle - value) / oracle


# ---------------------------------------------------------------------------
# configuration


def _desk_family_doc() -> dict:
    models = [{"kind": "rice", "s": float(s)} for s in range(1, 6)]
    models += [{"kind": "nakagami", "m": float(m)} for m in range(2, 7)]
    return {
        "num_users": [3, 4, 5, 6],
        "pathloss_exponents": [2.0, 3.0],
        "shadowing_sigmas_db": [3.0, 4.0, 5.0],
        "small_scale": models,
        "rate_thresholds_bps": [float(r) * 1e6 for r in range(1, 11)],
        "bandwidths_hz": [5e6, 10e6],
        "qos": {"phi": "secrecy_rate", "xi": "long"},
        "fixed_seed": None,
    }


DEFAULT_CONFIG = {
    "task": {},
    "samples": 100,
    "delta_w_hz": 10e3,
    "eval_samples": 1000,
    "n_mc": 200,
    "figures": True,
    "train": {
        "epochs": 500,
        "batch_size": 32,
        "lr": 1e-4,
        "eval_every": 50,
        "eval_samples": 200,
    },
    "meta": {
        "meta_epochs": 200,
        "inner_epochs": 5,
        "support_tasks": 4,
        "query_tasks": 2,
        "batch_size": 32,
        "query_batch": 32,
        "lr": 1e-4,
        "meta_lr": 1e-4,
        "variant": "hml",
        "gradient_mode": "first_order",
        "n_mc": 200,
        "mtl_epochs": None,
        "family": _desk_family_doc(),
    },
    "meta_test": {
        "fine_tune_epochs": 30,
        "methods": ["oracle", "random_init"],
        "checkpoints": {},
        "user_sweep": [],
    },
    "robustness": {
        "underestimate_db": [0.0, 3.0, 6.0, 9.0, 12.0],
    },
    "bench": {
        "num_users": 50,
        "timing_samples": 3,
        "min_ratio": 10.0,
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(doc: Optional[dict], seed: int, out_dir: str) -> dict:
    """Fill defaults; the result is idempotent under re-resolution."""
    cfg = _deep_merge(DEFAULT_CONFIG, doc or {})
    cfg["seed"] = int(cfg.get("seed", seed) if doc and "seed" in doc else seed)
    cfg["out"] = str(out_dir)
    return cfg


def load_config(path: Optional[str], seed: int, out_dir: str) -> dict:
    doc = None
    if path:
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict):
            raise ValueError("config document must be a JSON object")
    return resolve_config(doc, seed, out_dir)


def echo_config(cfg: dict) -> None:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def task_from_config(cfg: dict) -> TaskSpec:
    flat = FINE_TUNE_EVAL_TASK.to_flat_dict()
    flat["seed"] = cfg["seed"]
    flat.update(cfg.get("task", {}))
    extra = {k: v for k, v in cfg.get("task", {}).items()
             if k in ("area_half_width_m",)}
    task = TaskSpec.from_flat_dict(flat)
    if extra:
        task = task.with_overrides(**extra)
    return task


def _model_from_doc(doc: dict) -> SmallScaleModel:
    return SmallScaleModel(doc["kind"], s=doc.get("s"), m=doc.get("m"),
                           sigma=doc.get("sigma", 1.0 / np.sqrt(2.0)))


def family_from_doc(doc: dict) -> TaskFamily:
    return TaskFamily(
        num_users=tuple(int(u) for u in doc["num_users"]),
        pathloss_exponents=tuple(float(g) for g in doc["pathloss_exponents"]),
        shadowing_sigmas_db=tuple(float(s) for s in doc["shadowing_sigmas_db"]),
        small_scale_models=tuple(_model_from_doc(m) for m in doc["small_scale"]),
        rate_thresholds_bps=tuple(float(r) for r in doc["rate_thresholds_bps"]),
        bandwidths_hz=tuple(float(w) for w in doc["bandwidths_hz"]),
        qos=QosKind.parse(doc["qos"]["phi"], doc["qos"]["xi"]),
        fixed_seed=doc.get("fixed_seed"),
    )


def train_config_from(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                       lr=float(t["lr"]), seed=cfg["seed"],
                       n_mc=int(cfg["n_mc"]))


def meta_config_from(cfg: dict) -> MetaConfig:
    m = cfg["meta"]
    return MetaConfig(
        meta_epochs=int(m["meta_epochs"]), inner_epochs=int(m["inner_epochs"]),
        support_tasks=int(m["support_tasks"]), query_tasks=int(m["query_tasks"]),
        batch_size=int(m["batch_size"]), query_batch=int(m["query_batch"]),
        lr=float(m["lr"]), meta_lr=float(m["meta_lr"]), variant=m["variant"],
        gradient_mode=m["gradient_mode"], family=family_from_doc(m["family"]),
        n_mc=int(m["n_mc"]))


def _write_figures(cfg: dict, name: str, fn, *args, **kwargs) -> None:
    if not cfg.get("figures", True):
        return
    from . import figures
    getattr(figures, fn)(Path(cfg["out"]) / name, *args, **kwargs)


def _init_stream(cfg: dict) -> RngStream:
    """Parameter-init stream; shared by train, meta-train, and meta-test
    so 'random initialization' means the same parameters everywhere."""
    return RngStream(cfg["seed"], 0).child(STREAM_PARAMS)


# ---------------------------------------------------------------------------
# commands


def run_oracle(cfg: dict) -> Path:
    """Iterative-allocator reference run over n samples of one task."""
    task = task_from_config(cfg)
    dw = float(cfg["delta_w_hz"])
    rt = TaskRuntime(task, n_mc=int(cfg["n_mc"]), dw=dw)
    n = int(cfg["samples"])
    desc = task.describe()

    def one(i: int):
        t0 = time.perf_counter()
        counters = OpCounters()
        sample = rt.channel(POOL_EVAL, i)
        sched = schedule_users(task, sample, rt.model, dw=dw,
                               counters=counters)
        rows = []
        total = 0.0
        if sched.num_scheduled:
            alloc = allocate_iterative(sched, task, sample, dw, rt.model,
                                       counters=counters)
            total = alloc.sum_reward
            rows = [(i, *r) for r in alloc.csv_rows(sched)]
        wall = (time.perf_counter() - t0) * 1e3
        return rows, ResultRow("oracle", desc, "oracle", i, total, None,
                               counters.objective_evals, 0,
                               counters.scheduling_ops, wall)

    results = parallel_map(one, range(n))
    alloc_rows = [r for rows, _ in results for r in rows]
    sample_rows = [row for _, row in results]
    mean = float(np.mean([r.mean_sum_reward_bps for r in sample_rows]))
    summary = ResultRow("oracle_summary", desc, "oracle", 0, mean, None,
                        sum(r.objective_evals for r in sample_rows), 0,
                        sum(r.scheduling_ops for r in sample_rows),
                        sum(r.wall_ms for r in sample_rows))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "allocations.csv", ALLOCATION_HEADER, alloc_rows)
    write_csv(out / "results.csv", RESULT_HEADER,
              [r.as_tuple() for r in sample_rows + [summary]])
    _write_figures(cfg, "fig_oracle.png", "plot_sample_rewards",
                   [r.mean_sum_reward_bps for r in sample_rows])
    echo_config(cfg)
    return out / "results.csv"


def run_train(cfg: dict) -> Path:
    """Single-task unsupervised training with an oracle gap report."""
    task = task_from_config(cfg)
    dw = float(cfg["delta_w_hz"])
    tc = train_config_from(cfg)
    rt = TaskRuntime(task, n_mc=tc.n_mc, dw=dw)
    params = init_params(FnnArchitecture(), _init_stream(cfg))
    eval_every = int(cfg["train"]["eval_every"])
    eval_samples = int(cfg["train"]["eval_samples"])
    params, log = train_task(params, task, tc, runtime=rt,
                             eval_every=eval_every, eval_samples=eval_samples)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "params.json").write_text(save_params(params))
    (out / "log.csv").write_text(log.to_csv())
    rows = []
    if eval_samples:
        gnn = eval_mean_reward(params, rt, eval_samples)
        oracle = oracle_mean_reward(rt, eval_samples, dw)
        desc = task.describe()
        rows = [ResultRow("train", desc, "gnn", tc.epochs, gnn,
                          gap_pct(oracle, gnn)),
                ResultRow("train", desc, "oracle", tc.epochs, oracle, 0.0)]
        write_csv(out / "results.csv", RESULT_HEADER,
                  [r.as_tuple() for r in rows])
    _write_figures(cfg, "fig_training.png", "plot_train_log", log)
    echo_config(cfg)
    return out / "params.json"


def run_meta_train(cfg: dict) -> Path:
    """Meta-train phi (hml/maml) or the mtl/random baselines."""
    m = cfg["meta"]
    variant = m["variant"]
    rng = RngStream(cfg["seed"], 0)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    if variant in ("hml", "maml"):
        phi, log = meta_train(meta_config_from(cfg), rng)
        draw_rows = [(e, ";".join(str(s) for s in sup),
                      ";".join(str(s) for s in qry))
                     for e, (sup, qry) in enumerate(log.task_draws)]
        write_csv(out / "task_draws.csv", ("epoch", "support_seeds",
                                           "query_seeds"), draw_rows)
    elif variant == "mtl":
        epochs = m["mtl_epochs"]
        if epochs is None:
            epochs = (int(m["meta_epochs"]) * int(m["inner_epochs"])
                      * int(m["support_tasks"]))
        tc = TrainConfig(epochs=int(epochs), batch_size=int(m["batch_size"]),
                         lr=float(m["lr"]), seed=cfg["seed"],
                         n_mc=int(m["n_mc"]))
        phi = baseline_mtl_pretrain(tc, family_from_doc(m["family"]), rng,
                                    FnnArchitecture(), n_mc=int(m["n_mc"]))
        log = TrainLog()
    elif variant == "random":
        phi = init_params(FnnArchitecture(), _init_stream(cfg))
        log = TrainLog()
    else:
        raise ValueError(f"unknown meta-train variant {variant!r}")
    (out / "params.json").write_text(save_params(phi))
    (out / "log.csv").write_text(log.to_csv())
    if log.rows:
        _write_figures(cfg, "fig_meta_training.png", "plot_train_log", log)
    echo_config(cfg)
    return out / "params.json"


def _meta_test_params(method: str, cfg: dict, arch: FnnArchitecture):
    if method == "random_init":
        return init_params(arch, _init_stream(cfg))
    path = cfg["meta_test"]["checkpoints"].get(method)
    if not path:
        raise FileNotFoundError(f"no checkpoint configured for method {method!r}")
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise FileNotFoundError(f"checkpoint for {method!r}: {err}") from err
    return load_params(text)


def run_meta_test(cfg: dict) -> Path:
    """Fine-tune each method's phi on the unseen task; report per epoch."""
    task = task_from_config(cfg)
    dw = float(cfg["delta_w_hz"])
    tc = train_config_from(cfg)
    eval_samples = int(cfg["eval_samples"])
    epochs = int(cfg["meta_test"]["fine_tune_epochs"])
    methods = list(cfg["meta_test"]["methods"])
    rt = TaskRuntime(task, n_mc=tc.n_mc, dw=dw)
    desc = task.describe()
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    oracle = oracle_mean_reward(rt, eval_samples, dw) \
        if "oracle" in methods else None
    rows = []
    curves = {}
    if oracle is not None:
        curves["oracle"] = [oracle] * (epochs + 1)
        rows += [ResultRow("meta_test", desc, "oracle", e, oracle, 0.0)
                 for e in range(epochs + 1)]
    for method in methods:
        if method == "oracle":
            continue
        phi = _meta_test_params(method, cfg, FnnArchitecture())
        log, _ = meta_test(phi, task, epochs, tc, eval_samples, runtime=rt)
        curve = [r.eval_reward_bps for r in log.rows]
        curves[method] = curve
        (out / f"log_{method}.csv").write_text(log.to_csv())
        for r in log.rows:
            gap = None if oracle is None else gap_pct(oracle, r.eval_reward_bps)
            if gap is not None and gap < -0.5:
                print(f"warning: {method} epoch {r.epoch} beats the oracle "
                      f"by {-gap:.2f}% (block-quantization margin exceeded)",
                      file=sys.stderr)
            rows.append(ResultRow("meta_test", desc, method, r.epoch,
                                  r.eval_reward_bps, gap, wall_ms=r.wall_ms))

    sweep = [int(u) for u in cfg["meta_test"]["user_sweep"]]
    for method in methods:
        if method == "oracle" or not sweep:
            continue
        phi = _meta_test_params(method, cfg, FnnArchitecture())
        for u in sweep:
            sub = task.with_overrides(num_users=u)
            sub_rt = TaskRuntime(sub, n_mc=tc.n_mc, dw=dw)
            gnn = eval_mean_reward(phi, sub_rt, eval_samples)
            orc = oracle_mean_reward(sub_rt, eval_samples, dw)
            rows.append(ResultRow("meta_test_user_sweep", sub.describe(),
                                  method, u, gnn, gap_pct(orc, gnn)))
            rows.append(ResultRow("meta_test_user_sweep", sub.describe(),
                                  "oracle", u, orc, 0.0))
    write_csv(out / "results.csv", RESULT_HEADER, [r.as_tuple() for r in rows])
    _write_figures(cfg, "fig_meta_test.png", "plot_meta_test", curves)
    echo_config(cfg)
    return out / "results.csv"


def _bench_sample(num_users: int, seed: int) -> ChannelSample:
    """Strong-main/weak-eavesdropper sample so every user schedules."""
    gen = RngStream(seed, 0xBE9C).generator()
    zetas = 10 ** gen.uniform(6.8, 8.0, size=num_users)
    ratio = gen.uniform(0.05, 0.5, size=num_users)
    p = 0.19952623149688786
    n0 = 3.981071705534985e-21
    alpha = zetas * n0 / p
    return ChannelSample(alpha=alpha, g=np.ones(num_users),
                         alpha_e=alpha * ratio, g_e=np.ones(num_users),
                         tx_power_w=p, noise_w_per_hz=n0)


def run_bench(cfg: dict) -> Path:
    """Complexity accounting and measured oracle/GNN timing ratio.

    The scenario is pinned (secrecy-long, full slice width, K strong
    users) so the measurement matches the published comparison shape;
    only the bench section of the config steers it.
    """
    dw = float(cfg["delta_w_hz"])
    num_users = int(cfg["bench"]["num_users"])
    reps = int(cfg["bench"]["timing_samples"])
    task = FINE_TUNE_EVAL_TASK.with_overrides(
        num_users=num_users, rate_threshold_bps=1e6, seed=cfg["seed"])
    rt = TaskRuntime(task, n_mc=int(cfg["n_mc"]), dw=dw)
    params = init_params(FnnArchitecture(), _init_stream(cfg))
    desc = task.describe()

    t_sched, t_alloc, t_fwd = [], [], []
    counters = OpCounters()
    sched = alloc = None
    for rep in range(reps):
        sample = _bench_sample(num_users, cfg["seed"] + rep)
        t0 = time.perf_counter()
        sched = schedule_users(task, sample, rt.model, dw=dw,
                               counters=counters)
        t_sched.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        alloc = allocate_iterative(sched, task, sample, dw, rt.model,
                                   counters=counters)
        t_alloc.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        forward(params, sched, counters)
        t_fwd.append(time.perf_counter() - t0)
    k = sched.num_scheduled
    sched_ms = float(np.median(t_sched)) * 1e3
    alloc_ms = float(np.median(t_alloc)) * 1e3
    fwd_ms = float(np.median(t_fwd)) * 1e3
    ratio = (sched_ms + alloc_ms) / (sched_ms + fwd_ms)
    analytic_gnn = estimate_complexity("gnn", k)
    analytic_iter = estimate_complexity("iterative", k,
                                        surplus=sched.surplus_hz, dw=dw)
    report = {
        "scheduled_users": k,
        "delta_w_hz": dw,
        "surplus_hz": sched.surplus_hz,
        "analytic_gnn_ops": analytic_gnn,
        "analytic_iterative_evals": analytic_iter,
        "measured_objective_evals": counters.objective_evals,
        "measured_fnn_multiplies": counters.fnn_multiplies,
        "measured_scheduling_ops": counters.scheduling_ops,
        "schedule_ms": sched_ms,
        "iterative_ms": alloc_ms,
        "gnn_forward_ms": fwd_ms,
        "oracle_over_gnn_wall_ratio": ratio,
    }
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(report, indent=2) + "\n")
    rows = [
        ResultRow("bench", desc, "iterative", 0, alloc.sum_reward, 0.0,
                  counters.objective_evals, 0, counters.scheduling_ops,
                  sched_ms + alloc_ms),
        ResultRow("bench", desc, "gnn", 0, 0.0, None, 0,
                  counters.fnn_multiplies, counters.scheduling_ops,
                  sched_ms + fwd_ms),
    ]
    write_csv(out / "results.csv", RESULT_HEADER, [r.as_tuple() for r in rows])
    _write_figures(cfg, "fig_bench.png", "plot_bench", report)
    echo_config(cfg)
    return out / "bench.json"


def run_robustness(cfg: dict) -> Path:
    """Eavesdropper-underestimation sweep for the oracle and GNN paths."""
    task = task_from_config(cfg)
    if not task.qos.needs_eavesdropper:
        raise ValueError("robustness requires a secrecy-rate task")
    dw = float(cfg["delta_w_hz"])
    levels = [float(x) for x in cfg["robustness"]["underestimate_db"]]
    eval_samples = int(cfg["eval_samples"])
    rt = TaskRuntime(task, n_mc=int(cfg["n_mc"]), dw=dw)
    checkpoint = cfg["meta_test"]["checkpoints"].get("gnn")
    if checkpoint:
        params = load_params(Path(checkpoint).read_text())
    else:
        params = init_params(FnnArchitecture(), _init_stream(cfg))
    sweep = robustness_sweep(params, task, levels, eval_samples, runtime=rt,
                             dw=dw)
    desc = task.describe()
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv",
              ("underestimate_db", "oracle_reward_bps", "gnn_reward_bps"),
              [(r["underestimate_db"], r["oracle_reward_bps"],
                r["gnn_reward_bps"]) for r in sweep])
    rows = []
    for i, r in enumerate(sweep):
        rows.append(ResultRow("robustness", desc, "oracle", i,
                              r["oracle_reward_bps"], 0.0))
        rows.append(ResultRow("robustness", desc, "gnn", i,
                              r["gnn_reward_bps"],
                              gap_pct(r["oracle_reward_bps"],
                                      r["gnn_reward_bps"])))
    write_csv(out / "results.csv", RESULT_HEADER, [r.as_tuple() for r in rows])
    _write_figures(cfg, "fig_robustness.png", "plot_robustness", sweep)
    echo_config(cfg)
    return out / "sweep.csv"
