"""Training loops: single-task SGA, meta-training, and the baselines.

The unsupervised objective is the batch-mean sum reward of the GNN's
allocations. Parameter updates ascend the objective expressed in units
of 1e4 bit/s: raw bits/s gradients overshoot wildly at the published
learning rate, while in these units plain SGA at lr 1e-4 converges
within a few hundred epochs, matching the reported training curves. The
scaling does not change the maximizers, and logged losses stay in
bits/s.

Every loop draws tasks, samples, and batches from counter-based streams
keyed on (seed, purpose, epoch, slot), so runs are bit-reproducible and
independent of evaluation order.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .allocation import DELTA_W_DEFAULT, ScheduleResult, allocate_iterative, schedule_users
from .channel import (
    SUPPORT_QUERY_FAMILY,
    ChannelSample,
    TaskFamily,
    TaskSpec,
    sample_channel_at,
)
from .gnn import FnnArchitecture, GnnParams, backward, forward, init_params, zeros_like
from .numerics import (
    STREAM_BATCH,
    STREAM_CHANNELS,
    STREAM_EVAL,
    STREAM_PARAMS,
    STREAM_TASKS,
    RngStream,
)
from .qos import RewardModel, link_budget

REWARD_SCALE = 1e4  # gradient updates use the objective in these bit/s units

# sample-pool roles within one task
POOL_TRAIN = "train"
POOL_QUERY = "query"
POOL_EVAL = "eval"
_POOL_STREAMS = {POOL_TRAIN: STREAM_CHANNELS,
                 POOL_QUERY: STREAM_CHANNELS ^ 0x51525953,
                 POOL_EVAL: STREAM_EVAL}


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    """Single-task training knobs."""

    epochs: int
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0             # root of the batch-selection streams
    pool_size: int = 10_000
    n_mc: int = 1000          # effective-capacity estimator draws

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs, batch size, and lr must be non-negative")


@dataclass(frozen=True)
class MetaConfig:
    """Meta-training knobs for both the HML and MAML variants.

    HML draws its query tasks independently of the support tasks each
    meta-epoch; MAML reuses the support tasks as query tasks.
    """

    meta_epochs: int
    inner_epochs: int
    support_tasks: int = 4
    query_tasks: int = 2
    batch_size: int = 32
    query_batch: int = 32
    lr: float = 1e-4
    meta_lr: float = 1e-4
    variant: str = "hml"                   # "hml" | "maml"
    gradient_mode: str = "first_order"     # "first_order" | "second_order_fd"
    family: TaskFamily = SUPPORT_QUERY_FAMILY
    arch: FnnArchitecture = FnnArchitecture()
    pool_size: int = 10_000
    n_mc: int = 1000

    def __post_init__(self):
        if self.variant not in ("hml", "maml"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.gradient_mode not in ("first_order", "second_order_fd"):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")
        if min(self.meta_epochs, self.support_tasks, self.query_tasks,
               self.batch_size, self.query_batch) < 1 or self.inner_epochs < 0:
            raise ValueError("meta batch sizes must be positive")


@dataclass
class TrainLogRow:
    epoch: int
    loss_bps: float
    eval_reward_bps: Optional[float] = None
    wall_ms: float = 0.0


@dataclass
class TrainLog:
    """Per-epoch training record; serializes to the log CSV schema."""

    rows: list = field(default_factory=list)
    task_draws: list = field(default_factory=list)  # meta: (support, query) seeds

    def append(self, row: TrainLogRow):
        self.rows.append(row)

    def csv_lines(self) -> list[str]:
        lines = ["epoch,loss_bps,eval_reward_bps,wall_ms"]
        for r in self.rows:
            ev = "" if r.eval_reward_bps is None else repr(float(r.eval_reward_bps))
            lines.append(f"{r.epoch},{repr(float(r.loss_bps))},{ev},"
                         f"{repr(float(r.wall_ms))}")
        return lines

    def to_csv(self) -> str:
        return "\n".join(self.csv_lines()) + "\n"


class TaskRuntime:
    """One task bound to its reward model and lazily realized sample pools.

    Scheduling a sample is parameter-free, so schedules and scheduled
    link budgets are cached per (pool, index) and shared by training,
    evaluation, and the oracle.
    """

    def __init__(self, task: TaskSpec, n_mc: int = 1000,
                 pool_size: int = 10_000, dw: float = DELTA_W_DEFAULT):
        self.task = task
        self.model = RewardModel.for_task(task, n_mc)
        self.pool_size = pool_size
        self.dw = dw
        self._cache: dict = {}

    def channel(self, pool: str, index: int) -> ChannelSample:
        rng = RngStream(self.task.seed, _POOL_STREAMS[pool])
        return sample_channel_at(self.task, rng, index)

    def scheduled(self, pool: str, index: int):
        """(ScheduleResult, scheduled LinkBudget) for one pool sample."""
        key = (pool, index)
        hit = self._cache.get(key)
        if hit is None:
            sample = self.channel(pool, index)
            sched = schedule_users(self.task, sample, self.model, dw=self.dw)
            lb = sched.subset_budget(link_budget(self.task, sample)) \
                if sched.num_scheduled else None
            hit = (sched, lb)
            self._cache[key] = hit
        return hit

    def oracle_sum_reward(self, pool: str, index: int,
                          dw: Optional[float] = None) -> float:
        sched, _ = self.scheduled(pool, index)
        if sched.num_scheduled == 0:
            return 0.0
        sample = self.channel(pool, index)
        alloc = allocate_iterative(sched, self.task, sample, dw or self.dw,
                                   self.model)
        return alloc.sum_reward


def _sample_objective(params: GnnParams, rt: TaskRuntime, pool: str,
                      index: int, want_grad: bool):
    """Sum reward of one sample and, optionally, its parameter gradient."""
    sched, lb = rt.scheduled(pool, index)
    if sched.num_scheduled == 0:
        return 0.0, (zeros_like(params) if want_grad else None)
    w_tilde, trace = forward(params, sched)
    rewards = np.asarray(rt.model.reward(w_tilde * sched.w_tau, lb))
    value = float(np.sum(rewards))
    grads = backward(params, trace, sched, rt.model, lb) if want_grad else None
    return value, grads


def loss_batch(params: GnnParams, task: TaskSpec,
               samples: Sequence[ChannelSample],
               model: Optional[RewardModel] = None,
               dw: float = DELTA_W_DEFAULT) -> float:
    """Batch-mean sum reward (bits/s) of the GNN's allocations.

    Samples with empty schedules contribute zero.
    """
    if not samples:
        raise ValueError("loss_batch needs a non-empty batch")
    if model is None:
        model = RewardModel.for_task(task)
    total = 0.0
    for sample in samples:
        sched = schedule_users(task, sample, model, dw=dw)
        if sched.num_scheduled == 0:
            continue
        lb = sched.subset_budget(link_budget(task, sample))
        w_tilde, _ = forward(params, sched)
        total += float(np.sum(np.asarray(model.reward(w_tilde * sched.w_tau, lb))))
    return total / len(samples)


def _finite_or_raise(value: float, grads: GnnParams, where: str):
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss in {where}: {value}")
    for g in (*grads.weights, *grads.biases):
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {where}")


def _batch_indices(seed: int, pool_size: int, j: int, *tags: int) -> np.ndarray:
    gen = RngStream(seed, STREAM_BATCH).child(*tags).generator()
    return gen.choice(pool_size, size=min(j, pool_size), replace=False)


def _sga_step(params: GnnParams, rt: TaskRuntime, pool: str, indices,
              lr: float, where: str) -> tuple[GnnParams, float]:
    value, acc = 0.0, zeros_like(params)
    for i in indices:
        v, g = _sample_objective(params, rt, pool, int(i), True)
        value += v
        acc = acc.step(g, 1.0)
    value /= len(indices)
    _finite_or_raise(value, acc, where)
    scale = lr / (len(indices) * REWARD_SCALE)
    return params.step(acc, scale), value


def eval_mean_reward(params: GnnParams, rt: TaskRuntime, n_samples: int,
                     pool: str = POOL_EVAL) -> float:
    """Mean sum reward of the GNN path over a fixed evaluation set."""
    total = 0.0
    for i in range(n_samples):
        value, _ = _sample_objective(params, rt, pool, i, False)
        total += value
    return total / n_samples


def oracle_mean_reward(rt: TaskRuntime, n_samples: int,
                       dw: Optional[float] = None,
                       pool: str = POOL_EVAL) -> float:
    """Mean sum reward of the iterative allocator over the same set."""
    total = 0.0
    for i in range(n_samples):
        total += rt.oracle_sum_reward(pool, i, dw)
    return total / n_samples


def train_task(params_init: GnnParams, task: TaskSpec, cfg: TrainConfig,
               runtime: Optional[TaskRuntime] = None,
               eval_every: int = 0, eval_samples: int = 0) -> tuple[GnnParams, TrainLog]:
    """Unsupervised stochastic gradient ascent on one task.

    Logs the pre-update batch loss each epoch; optionally evaluates the
    held-out mean reward every eval_every epochs.
    """
    rt = runtime or TaskRuntime(task, n_mc=cfg.n_mc, pool_size=cfg.pool_size)
    params = params_init
    log = TrainLog()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        idx = _batch_indices(cfg.seed, cfg.pool_size, cfg.batch_size, epoch)
        params, loss = _sga_step(params, rt, POOL_TRAIN, idx, cfg.lr,
                                 f"train_task epoch {epoch}")
        ev = None
        if eval_samples and eval_every and (epoch % eval_every == 0
                                            or epoch == cfg.epochs - 1):
            ev = eval_mean_reward(params, rt, eval_samples)
        log.append(TrainLogRow(epoch, loss, ev,
                               (time.perf_counter() - t0) * 1e3))
    return params, log


def _draw_task(family: TaskFamily, rng: RngStream, n_mc: int,
               pool_size: int) -> TaskRuntime:
    return TaskRuntime(family.sample(rng), n_mc=n_mc, pool_size=pool_size)


def _adapt(phi: GnnParams, rt: TaskRuntime, cfg: MetaConfig, seed: int,
           m: int, slot: int) -> GnnParams:
    theta = phi
    for n in range(cfg.inner_epochs):
        idx = _batch_indices(seed, cfg.pool_size, cfg.batch_size,
                             m, slot, n)
        theta, _ = _sga_step(theta, rt, POOL_TRAIN, idx, cfg.lr,
                             f"inner epoch {n} of meta epoch {m}")
    return theta


def _epoch_tasksets(cfg: MetaConfig, rng: RngStream, m: int):
    """Support and query runtimes for one meta-epoch."""
    support = [_draw_task(cfg.family, rng.child(STREAM_TASKS, m, i),
                          cfg.n_mc, cfg.pool_size)
               for i in range(cfg.support_tasks)]
    if cfg.variant == "maml":
        query = support
    else:
        query = [_draw_task(cfg.family, rng.child(STREAM_TASKS, m, 1000 + i),
                            cfg.n_mc, cfg.pool_size)
                 for i in range(cfg.query_tasks)]
    return support, query


def _query_eval(theta: GnnParams, rts, cfg: MetaConfig, seed: int, m: int,
                slots) -> tuple[float, GnnParams]:
    """Mean query loss and first-order gradient of one adapted theta."""
    value = 0.0
    acc = zeros_like(theta)
    for rt, slot in zip(rts, slots):
        idx = _batch_indices(seed, cfg.pool_size, cfg.query_batch,
                             m, 7000 + slot)
        for i in idx:
            v, g = _sample_objective(theta, rt, POOL_QUERY, int(i), True)
            value += v
            acc = acc.step(g, 1.0)
    n = len(rts) * cfg.query_batch
    return value / n, acc


def _meta_epoch_value(phi: GnnParams, support, query, cfg: MetaConfig,
                      seed: int, m: int) -> float:
    """Meta objective of one epoch with every stream frozen by (seed, m)."""
    total = 0.0
    for i, rt in enumerate(support):
        theta = _adapt(phi, rt, cfg, seed, m, i)
        rts = [rt] if cfg.variant == "maml" else query
        slots = [i] if cfg.variant == "maml" else list(range(len(query)))
        v, _ = _query_eval(theta, rts, cfg, seed, m, slots)
        total += v
    return total / len(support)


def meta_train(cfg: MetaConfig, rng: RngStream) -> tuple[GnnParams, TrainLog]:
    """Meta-train initial parameters phi with HML or MAML.

    Each meta-epoch adapts phi on every support task for inner_epochs
    SGA steps and evaluates the adapted parameters on the query tasks;
    phi then ascends the mean query loss. first_order approximates the
    meta-gradient by the query gradient at the adapted parameters;
    second_order_fd differentiates through the inner loop by central
    finite differences (small architectures only).
    """
    phi = init_params(cfg.arch, rng.child(STREAM_PARAMS))
    log = TrainLog()
    seed = rng.seed ^ rng.stream_id
    for m in range(cfg.meta_epochs):
        t0 = time.perf_counter()
        support, query = _epoch_tasksets(cfg, rng, m)
        log.task_draws.append(([rt.task.seed for rt in support],
                               [rt.task.seed for rt in query]))
        if cfg.gradient_mode == "first_order":
            meta_value = 0.0
            acc = zeros_like(phi)
            tasks_per_theta = 1 if cfg.variant == "maml" else cfg.query_tasks
            for i, rt in enumerate(support):
                theta = _adapt(phi, rt, cfg, seed, m, i)
                rts = [rt] if cfg.variant == "maml" else query
                slots = [i] if cfg.variant == "maml" else list(range(len(query)))
                v, g = _query_eval(theta, rts, cfg, seed, m, slots)
                meta_value += v
                acc = acc.step(g, 1.0)
            meta_value /= len(support)
            _finite_or_raise(meta_value, acc, f"meta epoch {m}")
            samples_total = len(support) * tasks_per_theta * cfg.query_batch
            phi = phi.step(acc, cfg.meta_lr / (samples_total * REWARD_SCALE))
        else:
            flat = phi.to_flat()
            grad = np.empty_like(flat)
            h = 1e-5
            for j in range(flat.size):
                up, dn = flat.copy(), flat.copy()
                up[j] += h
                dn[j] -= h
                vu = _meta_epoch_value(phi.from_flat(up), support, query,
                                       cfg, seed, m)
                vd = _meta_epoch_value(phi.from_flat(dn), support, query,
                                       cfg, seed, m)
                grad[j] = (vu - vd) / (2 * h)
            meta_value = _meta_epoch_value(phi, support, query, cfg, seed, m)
            phi = phi.step(phi.from_flat(grad), cfg.meta_lr / REWARD_SCALE)
        log.append(TrainLogRow(m, meta_value, None,
                               (time.perf_counter() - t0) * 1e3))
    return phi, log


@dataclass(frozen=True)
class MetaTestStats:
    zero_shot_reward_bps: float
    final_reward_bps: float
    eval_samples: int


def meta_test(phi: GnnParams, task: TaskSpec, fine_tune_epochs: int,
              cfg: TrainConfig, eval_samples: int = 1000,
              runtime: Optional[TaskRuntime] = None) -> tuple[TrainLog, MetaTestStats]:
    """Fine-tune from phi on an unseen task, evaluating after each epoch.

    Row 0 is the zero-shot evaluation of phi itself; fine-tuning batches
    come from the task's training pool, evaluation from the disjoint
    eval pool.
    """
    rt = runtime or TaskRuntime(task, n_mc=cfg.n_mc, pool_size=cfg.pool_size)
    log = TrainLog()
    t0 = time.perf_counter()
    zero_shot = eval_mean_reward(phi, rt, eval_samples)
    log.append(TrainLogRow(0, math.nan, zero_shot,
                           (time.perf_counter() - t0) * 1e3))
    params = phi
    final = zero_shot
    for epoch in range(fine_tune_epochs):
        t0 = time.perf_counter()
        idx = _batch_indices(cfg.seed, cfg.pool_size, cfg.batch_size, epoch)
        params, loss = _sga_step(params, rt, POOL_TRAIN, idx, cfg.lr,
                                 f"fine-tune epoch {epoch}")
        final = eval_mean_reward(params, rt, eval_samples)
        log.append(TrainLogRow(epoch + 1, loss, final,
                               (time.perf_counter() - t0) * 1e3))
    return log, MetaTestStats(zero_shot, final, eval_samples)


def baseline_mtl_pretrain(cfg: TrainConfig, family: TaskFamily,
                          rng: RngStream,
                          arch: FnnArchitecture = FnnArchitecture(),
                          n_mc: int = 1000) -> GnnParams:
    """Multi-task pre-training: one task and one SGA step per epoch."""
    params = init_params(arch, rng.child(STREAM_PARAMS))
    for epoch in range(cfg.epochs):
        rt = _draw_task(family, rng.child(STREAM_TASKS, epoch), n_mc,
                        cfg.pool_size)
        idx = _batch_indices(cfg.seed, cfg.pool_size, cfg.batch_size, epoch)
        params, _ = _sga_step(params, rt, POOL_TRAIN, idx, cfg.lr,
                              f"mtl epoch {epoch}")
    return params


def _achieved_secrecy(rt: TaskRuntime, sample: ChannelSample,
                      sched: ScheduleResult, w: np.ndarray) -> float:
    """Sum secrecy reward at bandwidths w using the TRUE channel gains."""
    if sched.num_scheduled == 0:
        return 0.0
    lb_true = sched.subset_budget(link_budget(rt.task, sample))
    return float(np.sum(np.asarray(rt.model.reward(w, lb_true))))


def robustness_sweep(params: GnnParams, task: TaskSpec,
                     underestimate_db: Sequence[float],
                     n_samples: int = 1000,
                     runtime: Optional[TaskRuntime] = None,
                     dw: float = DELTA_W_DEFAULT,
                     n_mc: int = 1000) -> list[dict]:
    """Secrecy robustness to an underestimated eavesdropper channel.

    Scheduling and allocation decide with h_e scaled down by each dB
    level; the achieved reward is then computed with the true h_e. The
    same evaluation samples are reused at every level so the curves are
    paired.
    """
    if not task.qos.needs_eavesdropper:
        raise ValueError("robustness sweep requires a secrecy-rate task")
    rt = runtime or TaskRuntime(task, n_mc=n_mc, dw=dw)
    rows = []
    samples = [rt.channel(POOL_EVAL, i) for i in range(n_samples)]
    for level in underestimate_db:
        factor = 10.0 ** (-float(level) / 10.0)
        oracle_total = 0.0
        gnn_total = 0.0
        for sample in samples:
            assumed = replace(sample, alpha_e=sample.alpha_e * factor)
            sched = schedule_users(task, assumed, rt.model, dw=dw)
            if sched.num_scheduled == 0:
                continue
            alloc = allocate_iterative(sched, task, assumed, dw, rt.model)
            oracle_total += _achieved_secrecy(rt, sample, sched, alloc.w)
            w_tilde, _ = forward(params, sched)
            gnn_total += _achieved_secrecy(rt, sample, sched,
                                           w_tilde * sched.w_tau)
        rows.append({"underestimate_db": float(level),
                     "oracle_reward_bps": oracle_total / n_samples,
                     "gnn_reward_bps": gnn_total / n_samples})
    return rows
