"""User scheduling and the two reference bandwidth allocators.

Scheduling drops users that cannot meet their QoS target even with the
whole slice, finds per-user minimum bandwidths by bisection, then evicts
the most expensive users until the slice budget holds. The iterative
allocator hands out surplus bandwidth one resource block at a time to
the user with the largest marginal reward; for concave rewards this is
the optimum, which the brute-force enumerator verifies on small
instances.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .channel import ChannelSample, TaskSpec
from .numerics import Tolerance
from .qos import LinkBudget, RewardModel, link_budget

DELTA_W_DEFAULT = 10e3  # resource-block bandwidth, Hz
W_MIN_BRACKET_LO = 1.0  # bisection lower edge for long-blocklength kinds, Hz


class DropReason(enum.Enum):
    INFEASIBLE_ALONE = "infeasible_alone"
    BUDGET_EVICTED = "budget_evicted"


@dataclass
class OpCounters:
    """Monotone operation tallies for complexity reporting."""

    objective_evals: int = 0
    fnn_multiplies: int = 0
    scheduling_ops: int = 0


def _subset_budget(lb: LinkBudget, idx) -> LinkBudget:
    """Restrict per-user link budgets to the given user indices."""
    h_e = None if lb.h_e is None else np.asarray(lb.h_e)[idx]
    p = lb.p if np.ndim(lb.p) == 0 else np.asarray(lb.p)[idx]
    return LinkBudget(p=p, h=np.asarray(lb.h)[idx], n0=lb.n0, h_e=h_e)


@dataclass(frozen=True)
class ScheduleResult:
    """Scheduled-user set with minimum bandwidths and normalized features.

    surplus_hz is the canonical leftover both allocators discretize into
    blocks; surplus_norm is kept as 1 - sum(w_min_norm) exactly so the
    readout's normalized bandwidths sum to one in float arithmetic.
    """

    scheduled: np.ndarray           # user indices, ascending
    w_min: np.ndarray               # Hz, aligned with scheduled
    w_min_norm: np.ndarray          # w_min / W_tau
    surplus_norm: float             # 1 - sum(w_min_norm)
    surplus_hz: float               # W_tau - sum(w_min)
    dropped: tuple                  # (user index, DropReason) pairs
    w_tau: float

    @property
    def num_scheduled(self) -> int:
        return int(self.scheduled.size)

    def surplus_blocks(self, dw: float) -> int:
        return int(math.floor(self.surplus_hz / dw))

    def subset_budget(self, lb: LinkBudget) -> LinkBudget:
        return _subset_budget(lb, self.scheduled)


@dataclass(frozen=True)
class Allocation:
    """Final per-user bandwidths and the rewards they achieve."""

    w: np.ndarray
    rewards: np.ndarray
    sum_reward: float
    iterations_used: int

    def csv_rows(self, sched: ScheduleResult) -> list[tuple]:
        return [(int(u), float(wm), float(wa), float(r))
                for u, wm, wa, r in zip(sched.scheduled, sched.w_min,
                                        self.w, self.rewards)]


CSV_ALLOCATION_HEADER = ("user_index", "w_min_hz", "w_hz", "reward_bps")


def _scheduled_result(task: TaskSpec, keep: np.ndarray, w_min: np.ndarray,
                      dropped: list) -> ScheduleResult:
    w_tau = task.reserved_bandwidth_hz
    w_min_norm = w_min / w_tau
    surplus_norm = max(0.0, 1.0 - float(np.sum(w_min_norm)))
    surplus_hz = max(0.0, w_tau - float(np.sum(w_min)))
    return ScheduleResult(scheduled=keep, w_min=w_min, w_min_norm=w_min_norm,
                          surplus_norm=surplus_norm, surplus_hz=surplus_hz,
                          dropped=tuple(dropped), w_tau=w_tau)


def schedule_users(task: TaskSpec, sample: ChannelSample,
                   model: Optional[RewardModel] = None,
                   dw: float = DELTA_W_DEFAULT,
                   tol: Tolerance = Tolerance(),
                   counters: Optional[OpCounters] = None) -> ScheduleResult:
    """Feasibility check plus minimum-bandwidth scheduling.

    Phase 1 drops every user whose reward at the full slice bandwidth
    misses the target and bisects the remaining users' minimum
    bandwidths (vectorized, upper endpoint kept so the target is met).
    Phase 2 evicts the largest-w_min user, lowest index first on ties,
    until the minimums fit the slice.
    """
    if model is None:
        model = RewardModel.for_task(task)
    w_tau = task.reserved_bandwidth_hz
    target = task.rate_threshold_bps
    lb_all = link_budget(task, sample)
    u = task.num_users
    dropped: list = []

    r_max = np.atleast_1d(np.asarray(model.reward(w_tau, lb_all), dtype=float))
    if counters is not None:
        counters.scheduling_ops += u
    feasible = r_max >= target
    for i in np.nonzero(~feasible)[0]:
        dropped.append((int(i), DropReason.INFEASIBLE_ALONE))
    keep = np.nonzero(feasible)[0]
    if keep.size == 0:
        return _scheduled_result(task, keep, np.zeros(0), dropped)

    lb = _subset_budget(lb_all, keep)

    if task.qos.is_short:
        lo = np.full(keep.size, dw)
        hi = np.empty(keep.size)
        for j in range(keep.size):
            hi[j] = min(model.concave_bound(_scalar_budget(lb, j), w_tau, dw),
                        w_tau)
    else:
        lo = np.full(keep.size, W_MIN_BRACKET_LO)
        hi = np.full(keep.size, w_tau)

    # users already above target at the bracket's lower edge take it
    r_lo = np.atleast_1d(np.asarray(model.reward(lo, lb), dtype=float))
    if counters is not None:
        counters.scheduling_ops += keep.size
    w_min = np.where(r_lo >= target, lo, np.nan)
    active = r_lo < target
    for _ in range(tol.max_iter):
        if not np.any(active):
            break
        mid = 0.5 * (lo + hi)
        r_mid = np.atleast_1d(np.asarray(model.reward(mid, lb), dtype=float))
        if counters is not None:
            counters.scheduling_ops += int(np.sum(active))
        above = r_mid >= target
        hi = np.where(active & above, mid, hi)
        lo = np.where(active & ~above, mid, lo)
        done = active & ((hi - lo) <= tol.rel_tol * np.abs(mid))
        w_min = np.where(done, hi, w_min)
        active &= ~done
    w_min = np.where(np.isnan(w_min), hi, w_min)

    # Phase 2: evict the most expensive users until the budget holds
    keep_list = list(keep)
    w_list = list(w_min)
    while sum(w_list) > w_tau:
        k = int(np.argmax(w_list))  # first max wins the tie: lowest index
        dropped.append((int(keep_list[k]), DropReason.BUDGET_EVICTED))
        del keep_list[k], w_list[k]
        if counters is not None:
            counters.scheduling_ops += len(w_list) + 1
    return _scheduled_result(task, np.asarray(keep_list, dtype=int),
                             np.asarray(w_list, dtype=float), dropped)


def _scalar_budget(lb: LinkBudget, j: int) -> LinkBudget:
    h_e = None if lb.h_e is None else float(np.asarray(lb.h_e)[j])
    p = float(lb.p) if np.ndim(lb.p) == 0 else float(np.asarray(lb.p)[j])
    return LinkBudget(p=p, h=float(np.asarray(lb.h)[j]), n0=lb.n0, h_e=h_e)


def allocate_iterative(sched: ScheduleResult, task: TaskSpec,
                       sample: ChannelSample,
                       dw: float = DELTA_W_DEFAULT,
                       model: Optional[RewardModel] = None,
                       counters: Optional[OpCounters] = None) -> Allocation:
    """Greedy resource-block allocator, optimal for concave rewards.

    Starting from the minimum bandwidths, each round hands one block of
    dw to the user whose reward gains most (lowest index on ties) and
    stops early if no user gains, which protects the short-blocklength
    kinds from over-allocation past their concave region.

    Only the winner's marginal changes between rounds, so cached reward
    values make each round one evaluation; counters still accrue the
    algorithm's nominal K evaluations per round.
    """
    if sched.num_scheduled == 0:
        raise ValueError("cannot allocate with an empty scheduled set")
    if dw <= 0:
        raise ValueError("block size must be positive")
    if model is None:
        model = RewardModel.for_task(task)
    lb = sched.subset_budget(link_budget(task, sample))
    k = sched.num_scheduled
    w = sched.w_min.astype(float).copy()
    n_blocks = sched.surplus_blocks(dw)
    r_now = np.atleast_1d(np.asarray(model.reward(w, lb), dtype=float)).copy()
    r_plus = np.atleast_1d(np.asarray(model.reward(w + dw, lb), dtype=float)).copy()
    scalar_lbs = [_scalar_budget(lb, j) for j in range(k)]
    iterations = 0
    for _ in range(n_blocks):
        delta = r_plus - r_now
        j = int(np.argmax(delta))
        if delta[j] <= 0.0:
            break
        w[j] += dw
        r_now[j] = r_plus[j]
        r_plus[j] = float(np.asarray(model.reward(w[j] + dw, scalar_lbs[j])))
        iterations += 1
        if counters is not None:
            counters.objective_evals += k
    return Allocation(w=w, rewards=r_now, sum_reward=float(np.sum(r_now)),
                      iterations_used=iterations)


class InstanceTooLarge(ValueError):
    """Brute-force enumeration would exceed the composition cap."""


def _compositions(total: int, parts: int):
    """Yield all non-negative integer tuples of given length summing to total."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def allocate_bruteforce(sched: ScheduleResult, task: TaskSpec,
                        sample: ChannelSample,
                        dw: float = DELTA_W_DEFAULT,
                        model: Optional[RewardModel] = None,
                        max_combinations: float = 1e7) -> Allocation:
    """Exact maximizer over every split of the surplus blocks.

    Test oracle for the iterative allocator; only feasible on small
    instances because the composition count explodes.
    """
    if sched.num_scheduled == 0:
        raise ValueError("cannot allocate with an empty scheduled set")
    if model is None:
        model = RewardModel.for_task(task)
    k = sched.num_scheduled
    b = sched.surplus_blocks(dw)
    n_comb = math.comb(b + k - 1, k - 1)
    if n_comb > max_combinations:
        raise InstanceTooLarge(
            f"{n_comb} compositions of {b} blocks over {k} users exceed the cap")
    lb = sched.subset_budget(link_budget(task, sample))
    blocks = np.arange(b + 1, dtype=float) * dw
    table = np.empty((k, b + 1))
    for j in range(k):
        lb_j = _scalar_budget(lb, j)
        table[j] = np.asarray(model.reward(sched.w_min[j] + blocks, lb_j))
    best_sum = -np.inf
    best = None
    for combo in _compositions(b, k):
        s = sum(table[j][c] for j, c in enumerate(combo))
        if s > best_sum:
            best_sum = s
            best = combo
    w = sched.w_min + np.asarray(best, dtype=float) * dw
    rewards = np.array([table[j][c] for j, c in enumerate(best)])
    return Allocation(w=w, rewards=rewards, sum_reward=float(np.sum(rewards)),
                      iterations_used=b)


GNN_LAYERS_DEFAULT = (2, 32, 64, 32, 1)


def estimate_complexity(kind: str, k: int, surplus: float = 0.0,
                        dw: float = DELTA_W_DEFAULT,
                        fnn_layers: Sequence[int] = GNN_LAYERS_DEFAULT,
                        omega: float = 1.0) -> float:
    """Closed-form operation counts for the two allocation paths.

    "gnn": K * (sum of consecutive layer products + 2), the 2 covering
    the per-user softmax and readout multiplies. "iterative": K times
    the number of block rounds times the per-evaluation cost omega.
    """
    if k == 0:
        return 0.0
    if any(m <= 0 for m in fnn_layers):
        raise ValueError("layer sizes must be positive")
    if kind == "gnn":
        m_fnn = sum(a * b for a, b in zip(fnn_layers, fnn_layers[1:]))
        return float(k * (m_fnn + 2))
    if kind == "iterative":
        return float(k) * (surplus / dw) * omega
    raise ValueError(f"unknown complexity kind {kind!r}")
