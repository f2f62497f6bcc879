"""Task generation and wireless channel realization.

Covers user placement, path loss, log-normal shadowing, Rice/Nakagami/
Rayleigh small-scale fading, eavesdropper links, the per-slice bandwidth
reservation rule, and the train/test task families.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .numerics import RngStream, dbm_to_watts

# Table-II style radio defaults
DEFAULT_TX_POWER_W = dbm_to_watts(23.0)
DEFAULT_NOISE_W_PER_HZ = dbm_to_watts(-174.0)
DEFAULT_AREA_HALF_WIDTH_M = 100.0
# unit mean-square envelope when only the Rice s / Nakagami m shape is given
DEFAULT_SPREAD_SIGMA = 1.0 / math.sqrt(2.0)

MIN_DISTANCE_M = 1.0  # path-loss floor; the square area includes the BS


class Phi(enum.Enum):
    DATA_RATE = "data_rate"
    EFFECTIVE_CAPACITY = "effective_capacity"
    SECRECY_RATE = "secrecy_rate"


class Xi(enum.Enum):
    LONG = "long"
    SHORT = "short"


@dataclass(frozen=True)
class QosKind:
    """One of the six reward objectives: a (requirement, blocklength) pair."""

    phi: Phi
    xi: Xi

    @property
    def needs_eavesdropper(self) -> bool:
        return self.phi is Phi.SECRECY_RATE

    @property
    def is_short(self) -> bool:
        return self.xi is Xi.SHORT

    def label(self) -> str:
        return f"{self.phi.value}_{self.xi.value}"

    @staticmethod
    def parse(phi: str, xi: str) -> "QosKind":
        return QosKind(Phi(phi), Xi(xi))


ALL_QOS_KINDS = tuple(QosKind(phi, xi) for phi in Phi for xi in Xi)
SECRECY_LONG = QosKind(Phi.SECRECY_RATE, Xi.LONG)


@dataclass(frozen=True)
class SmallScaleModel:
    """Small-scale fading envelope distribution.

    kind "rice" uses (s, sigma), "nakagami" uses (m, sigma), "rayleigh"
    only sigma. sigma defaults to 1/sqrt(2) so the mean-square envelope
    is 1.
    """

    kind: str
    s: Optional[float] = None
    m: Optional[float] = None
    sigma: float = DEFAULT_SPREAD_SIGMA

    def __post_init__(self):
        if self.kind not in ("rice", "nakagami", "rayleigh"):
            raise ValueError(f"unknown small-scale kind {self.kind!r}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.kind == "rice" and (self.s is None or self.s <= 0):
            raise ValueError("rice model requires s > 0")
        if self.kind == "nakagami" and (self.m is None or self.m < 0.5):
            raise ValueError("nakagami model requires m >= 0.5")

    def sample(self, gen: np.random.Generator, size) -> np.ndarray:
        """Draw fading envelopes g (not powers)."""
        if self.kind == "rayleigh":
            return gen.rayleigh(scale=self.sigma, size=size)
        if self.kind == "rice":
            # |CN(s, 2 sigma^2)|: in-phase mean s, per-component var sigma^2
            i = gen.normal(self.s, self.sigma, size=size)
            q = gen.normal(0.0, self.sigma, size=size)
            return np.hypot(i, q)
        # nakagami: envelope^2 ~ Gamma(m, 2 sigma^2 / m)
        power = gen.gamma(self.m, 2.0 * self.sigma ** 2 / self.m, size=size)
        return np.sqrt(power)


def rice(s: float, sigma: float = DEFAULT_SPREAD_SIGMA) -> SmallScaleModel:
    return SmallScaleModel("rice", s=s, sigma=sigma)


def nakagami(m: float, sigma: float = DEFAULT_SPREAD_SIGMA) -> SmallScaleModel:
    return SmallScaleModel("nakagami", m=m, sigma=sigma)


def rayleigh(sigma: float = DEFAULT_SPREAD_SIGMA) -> SmallScaleModel:
    return SmallScaleModel("rayleigh", sigma=sigma)


@dataclass(frozen=True)
class TaskSpec:
    """One bandwidth-allocation problem family.

    The unit meta-learning iterates over: user count, channel model, QoS
    kind and threshold, and the bandwidth reserved for the slice.
    """

    num_users: int
    pathloss_exponent: float
    shadowing_sigma_db: float
    small_scale: SmallScaleModel
    qos: QosKind
    rate_threshold_bps: float
    reserved_bandwidth_hz: float
    seed: int = 0
    area_half_width_m: float = DEFAULT_AREA_HALF_WIDTH_M
    qci: int = 1

    def __post_init__(self):
        if self.num_users < 1:
            raise ValueError("num_users must be >= 1")
        if self.pathloss_exponent < 2:
            raise ValueError("pathloss_exponent must be >= 2")
        if self.shadowing_sigma_db < 0:
            raise ValueError("shadowing_sigma_db must be >= 0")
        if self.rate_threshold_bps <= 0 or self.reserved_bandwidth_hz <= 0:
            raise ValueError("rate threshold and reserved bandwidth must be positive")

    @property
    def has_eavesdropper(self) -> bool:
        return self.qos.needs_eavesdropper

    def with_overrides(self, **kwargs) -> "TaskSpec":
        return replace(self, **kwargs)

    def describe(self) -> str:
        w_mhz = self.reserved_bandwidth_hz / 1e6
        r_mbps = self.rate_threshold_bps / 1e6
        return (f"U={self.num_users} {self.qos.label()} "
                f"W={w_mhz:g}MHz r={r_mbps:g}Mbps {self.small_scale.kind}")

    def to_flat_dict(self) -> dict:
        doc = {
            "num_users": self.num_users,
            "pathloss_exponent": self.pathloss_exponent,
            "shadowing_sigma_db": self.shadowing_sigma_db,
            "small_scale.kind": self.small_scale.kind,
            "small_scale.sigma": self.small_scale.sigma,
            "qos.phi": self.qos.phi.value,
            "qos.xi": self.qos.xi.value,
            "rate_threshold_bps": self.rate_threshold_bps,
            "reserved_bandwidth_hz": self.reserved_bandwidth_hz,
            "seed": self.seed,
        }
        if self.small_scale.kind == "rice":
            doc["small_scale.s"] = self.small_scale.s
        if self.small_scale.kind == "nakagami":
            doc["small_scale.m"] = self.small_scale.m
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_flat_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_flat_dict(doc: dict) -> "TaskSpec":
        ss = SmallScaleModel(
            doc["small_scale.kind"],
            s=doc.get("small_scale.s"),
            m=doc.get("small_scale.m"),
            sigma=doc.get("small_scale.sigma", DEFAULT_SPREAD_SIGMA),
        )
        return TaskSpec(
            num_users=int(doc["num_users"]),
            pathloss_exponent=float(doc["pathloss_exponent"]),
            shadowing_sigma_db=float(doc["shadowing_sigma_db"]),
            small_scale=ss,
            qos=QosKind.parse(doc["qos.phi"], doc["qos.xi"]),
            rate_threshold_bps=float(doc["rate_threshold_bps"]),
            reserved_bandwidth_hz=float(doc["reserved_bandwidth_hz"]),
            seed=int(doc.get("seed", 0)),
        )

    @staticmethod
    def from_json(text: str) -> "TaskSpec":
        return TaskSpec.from_flat_dict(json.loads(text))


@dataclass(frozen=True)
class ChannelSample:
    """Realized per-user gains for one coherence interval.

    Large-scale (path loss x shadowing) and small-scale parts are kept
    separate because the effective-capacity rewards average over the
    small-scale distribution while conditioning on the large-scale gain.
    """

    alpha: np.ndarray                       # large-scale gain, per user
    g: np.ndarray                           # small-scale envelope, per user
    alpha_e: Optional[np.ndarray] = None    # eavesdropper large-scale gain
    g_e: Optional[np.ndarray] = None        # eavesdropper envelope
    tx_power_w: float = DEFAULT_TX_POWER_W
    noise_w_per_hz: float = DEFAULT_NOISE_W_PER_HZ

    @property
    def h(self) -> np.ndarray:
        return self.alpha * self.g

    @property
    def h_e(self) -> Optional[np.ndarray]:
        if self.alpha_e is None:
            return None
        return self.alpha_e * self.g_e

    @property
    def num_users(self) -> int:
        return self.alpha.shape[0]


class Taskset(enum.Enum):
    SUPPORT_QUERY = "support_query"
    FINE_TUNE_EVAL = "fine_tune_eval"


@dataclass(frozen=True)
class TaskFamily:
    """Discrete draw sets for each task field.

    The defaults below reproduce the published train/test splits; desk
    experiments shrink them to keep runtimes small. fixed_seed pins the
    sample streams of every drawn task, which degenerate single-task
    families use to make repeated draws identical.
    """

    num_users: Sequence[int]
    pathloss_exponents: Sequence[float]
    shadowing_sigmas_db: Sequence[float]
    small_scale_models: Sequence[SmallScaleModel]
    rate_thresholds_bps: Sequence[float]
    bandwidths_hz: Sequence[float]
    qos: QosKind = SECRECY_LONG
    fixed_seed: Optional[int] = None

    def sample(self, rng: RngStream, task_seed: Optional[int] = None) -> TaskSpec:
        gen = rng.generator()
        pick = lambda xs: xs[int(gen.integers(0, len(xs)))]
        if task_seed is None:
            task_seed = self.fixed_seed
        if task_seed is None:
            task_seed = int(gen.integers(0, 2 ** 63))
        return TaskSpec(
            num_users=int(pick(self.num_users)),
            pathloss_exponent=float(pick(self.pathloss_exponents)),
            shadowing_sigma_db=float(pick(self.shadowing_sigmas_db)),
            small_scale=pick(self.small_scale_models),
            qos=self.qos,
            rate_threshold_bps=float(pick(self.rate_thresholds_bps)),
            reserved_bandwidth_hz=float(pick(self.bandwidths_hz)),
            seed=task_seed,
        )


def single_task_family(task: TaskSpec) -> TaskFamily:
    """Degenerate family whose every draw is exactly this task."""
    return TaskFamily((task.num_users,), (task.pathloss_exponent,),
                      (task.shadowing_sigma_db,), (task.small_scale,),
                      (task.rate_threshold_bps,), (task.reserved_bandwidth_hz,),
                      qos=task.qos, fixed_seed=task.seed)


SUPPORT_QUERY_FAMILY = TaskFamily(
    num_users=tuple(range(10, 31)),
    pathloss_exponents=(2.0, 3.0),
    shadowing_sigmas_db=(3.0, 4.0, 5.0),
    small_scale_models=tuple(rice(float(s)) for s in range(1, 6))
    + tuple(nakagami(float(m)) for m in range(2, 7)),
    rate_thresholds_bps=tuple(float(r) * 1e6 for r in range(1, 11)),
    bandwidths_hz=tuple(float(w) * 1e6 for w in range(10, 101)),
)

FINE_TUNE_EVAL_TASK = TaskSpec(
    num_users=50,
    pathloss_exponent=4.0,
    shadowing_sigma_db=8.0,
    small_scale=rayleigh(),
    qos=SECRECY_LONG,
    rate_threshold_bps=10e6,
    reserved_bandwidth_hz=100e6,
)


def sample_task(rng: RngStream, taskset: Taskset,
                overrides: Optional[dict] = None) -> TaskSpec:
    """Draw one task from the named taskset, then apply field overrides."""
    if taskset is Taskset.SUPPORT_QUERY:
        task = SUPPORT_QUERY_FAMILY.sample(rng)
    else:
        task = FINE_TUNE_EVAL_TASK.with_overrides(
            seed=int(rng.generator().integers(0, 2 ** 63)))
    if overrides:
        task = task.with_overrides(**overrides)
    return task


def _sample_one(task: TaskSpec, gen: np.random.Generator,
                tx_power_w: float, noise_w_per_hz: float) -> ChannelSample:
    u = task.num_users
    half = task.area_half_width_m
    xy = gen.uniform(-half, half, size=(u, 2))
    d = np.maximum(np.hypot(xy[:, 0], xy[:, 1]), MIN_DISTANCE_M)
    shadow = 10.0 ** (gen.normal(0.0, task.shadowing_sigma_db, size=u) / 10.0)
    alpha = d ** (-task.pathloss_exponent) * shadow
    g = task.small_scale.sample(gen, u)
    alpha_e = g_e = None
    if task.has_eavesdropper:
        eve = gen.uniform(-half, half, size=2)
        d_e = np.maximum(np.hypot(xy[:, 0] - eve[0], xy[:, 1] - eve[1]),
                         MIN_DISTANCE_M)
        shadow_e = 10.0 ** (gen.normal(0.0, task.shadowing_sigma_db, size=u) / 10.0)
        alpha_e = d_e ** (-task.pathloss_exponent) * shadow_e
        g_e = task.small_scale.sample(gen, u)
    return ChannelSample(alpha=alpha, g=g, alpha_e=alpha_e, g_e=g_e,
                         tx_power_w=tx_power_w, noise_w_per_hz=noise_w_per_hz)


def sample_channel_at(task: TaskSpec, rng: RngStream, index: int,
                      tx_power_w: float = DEFAULT_TX_POWER_W,
                      noise_w_per_hz: float = DEFAULT_NOISE_W_PER_HZ) -> ChannelSample:
    """Realize the index-th channel sample of a stream.

    Indexed (not sequential) so gains never depend on consumption order.
    """
    gen = rng.child(index).generator()
    return _sample_one(task, gen, tx_power_w, noise_w_per_hz)


def sample_channels(task: TaskSpec, rng: RngStream, n: int,
                    tx_power_w: float = DEFAULT_TX_POWER_W,
                    noise_w_per_hz: float = DEFAULT_NOISE_W_PER_HZ) -> list[ChannelSample]:
    """Realize n channel samples for one task."""
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    return [sample_channel_at(task, rng, i, tx_power_w, noise_w_per_hz)
            for i in range(n)]


@dataclass(frozen=True)
class SliceConfig:
    """Total bandwidth plus the per-slice user QCI lists."""

    total_bandwidth_hz: float
    slices: Sequence[tuple[Sequence[int], QosKind]]

    def __post_init__(self):
        if self.total_bandwidth_hz <= 0:
            raise ValueError("total bandwidth must be positive")
        if not self.slices:
            raise ValueError("need at least one slice")
        for qcis, _ in self.slices:
            if any(q <= 0 for q in qcis):
                raise ValueError("QCIs must be positive")


def reserve_slice_bandwidth(cfg: SliceConfig) -> list[tuple[int, float]]:
    """QCI-weighted bandwidth shares that sum exactly to the total.

    All slices but the last round down to 1 Hz; the last takes the exact
    remainder.
    """
    sums = [float(sum(qcis)) for qcis, _ in cfg.slices]
    total = sum(sums)
    if total <= 0:
        raise ValueError("total QCI weight is zero")
    out = []
    remaining = cfg.total_bandwidth_hz
    for i, s in enumerate(sums):
        if i == len(sums) - 1:
            w = remaining
        else:
            w = math.floor(cfg.total_bandwidth_hz * s / total)
            remaining -= w
        out.append((i, float(w)))
    return out
