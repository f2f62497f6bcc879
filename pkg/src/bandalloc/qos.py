"""The six per-user reward functions and their bandwidth derivatives.

Rewards come in three flavors (data rate, effective capacity under a
statistical delay constraint, secrecy rate), each in a long and a short
blocklength variant. The short variants subtract a dispersion penalty
driven by the inverse Gaussian Q-function and are clamped at zero;
negative rates are non-physical. All functions broadcast over numpy
arrays in both w and the channel gains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .channel import ChannelSample, Phi, QosKind, TaskSpec, Xi
from .numerics import STREAM_EC, RngStream, Tolerance, inverse_q

LN2 = math.log(2.0)

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class LinkBudget:
    """Transmit power, channel gains, and noise density of one link set."""

    p: ArrayLike                   # transmit power, watts
    h: ArrayLike                   # main channel gain
    n0: float                      # noise spectral density, watts/Hz
    h_e: Optional[ArrayLike] = None  # eavesdropper channel gain

    def __post_init__(self):
        if self.n0 <= 0:
            raise ValueError("noise density must be positive")
        if np.any(np.asarray(self.p) <= 0):
            raise ValueError("transmit power must be positive")
        if np.any(np.asarray(self.h) < 0):
            raise ValueError("channel gain must be non-negative")
        if self.h_e is not None and np.any(np.asarray(self.h_e) < 0):
            raise ValueError("eavesdropper gain must be non-negative")

    @property
    def zeta(self) -> ArrayLike:
        """Received SNR density p*h/n0 in Hz."""
        return np.asarray(self.p) * np.asarray(self.h) / self.n0

    @property
    def zeta_e(self) -> ArrayLike:
        if self.h_e is None:
            raise ValueError("eavesdropper gain missing from link budget")
        return np.asarray(self.p) * np.asarray(self.h_e) / self.n0


@dataclass(frozen=True)
class ShortBlockParams:
    """Finite-blocklength constants: slot length, error, and leakage."""

    ts: float = 0.125e-3
    epsilon: float = 1e-5
    delta: float = 1e-2

    def __post_init__(self):
        if self.ts <= 0:
            raise ValueError("slot duration must be positive")
        if not (0 < self.epsilon < 1) or not (0 < self.delta < 1):
            raise ValueError("epsilon and delta must lie in (0,1)")

    @property
    def q_eps(self) -> float:
        return inverse_q(self.epsilon)

    @property
    def q_delta(self) -> float:
        return inverse_q(self.delta)


@dataclass(frozen=True)
class LatencyQos:
    """Queuing-delay QoS exponent and coherence time.

    theta may optionally be documented by its constituents; when all
    three are present they must reproduce theta = ln(1/eps)/(a*tau).
    """

    theta: float = 1e-3
    tc: float = 1e-3
    delay_violation_prob: Optional[float] = None
    arrival_rate_bps: Optional[float] = None
    delay_bound_s: Optional[float] = None

    def __post_init__(self):
        if self.theta <= 0 or self.tc <= 0:
            raise ValueError("theta and tc must be positive")
        parts = (self.delay_violation_prob, self.arrival_rate_bps,
                 self.delay_bound_s)
        if any(p is not None for p in parts):
            if any(p is None for p in parts):
                raise ValueError("delay derivation needs all three constituents")
            derived = math.log(1.0 / self.delay_violation_prob) / (
                self.arrival_rate_bps * self.delay_bound_s)
            if not math.isclose(derived, self.theta, rel_tol=1e-9):
                raise ValueError(
                    f"theta {self.theta} inconsistent with derived {derived}")

    @staticmethod
    def from_delay_requirements(delay_violation_prob: float,
                                arrival_rate_bps: float,
                                delay_bound_s: float,
                                tc: float = 1e-3) -> "LatencyQos":
        theta = math.log(1.0 / delay_violation_prob) / (
            arrival_rate_bps * delay_bound_s)
        return LatencyQos(theta, tc, delay_violation_prob, arrival_rate_bps,
                          delay_bound_s)


@dataclass(frozen=True)
class EcEstimator:
    """Fixed-draw Monte-Carlo estimator of the fading expectation.

    The draws are frozen per evaluation context (common random numbers)
    so the capacity is a smooth, bisection-safe function of bandwidth.
    """

    fading_draws: np.ndarray
    n_mc: int = 1000

    def __post_init__(self):
        draws = np.asarray(self.fading_draws, dtype=float)
        if draws.ndim != 1 or draws.size == 0:
            raise ValueError("fading_draws must be a non-empty 1-d array")
        if draws.size != self.n_mc:
            raise ValueError(
                f"fading_draws length {draws.size} != n_mc {self.n_mc}")
        object.__setattr__(self, "fading_draws", draws)

    @staticmethod
    def for_task(task: TaskSpec, n_mc: int = 1000) -> "EcEstimator":
        gen = RngStream(task.seed, STREAM_EC).generator()
        return EcEstimator(task.small_scale.sample(gen, n_mc), n_mc)


def _check_w(w: ArrayLike):
    if np.any(np.asarray(w) <= 0):
        raise ValueError("bandwidth must be positive")


def rate_long(w: ArrayLike, lb: LinkBudget) -> ArrayLike:
    """Shannon-capacity reward (w/ln2)*ln(1 + p h / (w n0))."""
    _check_w(w)
    return (np.asarray(w) / LN2) * np.log1p(lb.zeta / np.asarray(w))


def _rate_long_deriv_from_zeta(w, zeta):
    return (np.log1p(zeta / w) - zeta / (w + zeta)) / LN2


def _dispersion_penalty(w, zeta, q, ts):
    """q * (w/ln2) * sqrt(V / (ts w)) with V = 1 - (1+zeta/w)^-2."""
    v = 1.0 - (1.0 + zeta / w) ** -2
    return (q / (LN2 * math.sqrt(ts))) * np.sqrt(v * w)


def _dispersion_penalty_deriv(w, zeta, q, ts):
    v = 1.0 - (1.0 + zeta / w) ** -2
    dv = -2.0 * zeta / (w ** 2 * (1.0 + zeta / w) ** 3)
    vw = v * w
    out = np.zeros_like(np.asarray(vw, dtype=float))
    mask = vw > 0
    num = (v + w * dv)
    with np.errstate(invalid="ignore", divide="ignore"):
        full = (q / (LN2 * math.sqrt(ts))) * num / (2.0 * np.sqrt(vw))
    return np.where(mask, full, out)


def rate_short(w: ArrayLike, lb: LinkBudget,
               sb: ShortBlockParams = ShortBlockParams()) -> ArrayLike:
    """Normal-approximation achievable rate, clamped at zero."""
    _check_w(w)
    w = np.asarray(w, dtype=float)
    raw = rate_long(w, lb) - _dispersion_penalty(w, lb.zeta, sb.q_eps, sb.ts)
    return np.maximum(raw, 0.0)


def secrecy_long(w: ArrayLike, lb: LinkBudget) -> ArrayLike:
    """Positive part of the main-link rate minus the eavesdropped rate."""
    _check_w(w)
    w = np.asarray(w, dtype=float)
    diff = (w / LN2) * (np.log1p(lb.zeta / w) - np.log1p(lb.zeta_e / w))
    return np.maximum(diff, 0.0)


def secrecy_short(w: ArrayLike, lb: LinkBudget,
                  sb: ShortBlockParams = ShortBlockParams()) -> ArrayLike:
    """Finite-blocklength secrecy rate; zero when the main link is no
    stronger than the eavesdropper's."""
    _check_w(w)
    w = np.asarray(w, dtype=float)
    zeta, zeta_e = lb.zeta, lb.zeta_e
    diff = (w / LN2) * (np.log1p(zeta / w) - np.log1p(zeta_e / w))
    raw = (diff - _dispersion_penalty(w, zeta, sb.q_eps, sb.ts)
           - _dispersion_penalty(w, zeta_e, sb.q_delta, sb.ts))
    return np.where(zeta > zeta_e, np.maximum(raw, 0.0), 0.0)


def _rate_for_regime(w, zeta, xi: Xi, sb: ShortBlockParams):
    rl = (w / LN2) * np.log1p(zeta / w)
    if xi is Xi.LONG:
        return rl
    return np.maximum(rl - _dispersion_penalty(w, zeta, sb.q_eps, sb.ts), 0.0)


def _rate_deriv_for_regime(w, zeta, xi: Xi, sb: ShortBlockParams):
    d = _rate_long_deriv_from_zeta(w, zeta)
    if xi is Xi.LONG:
        return d
    rl = (w / LN2) * np.log1p(zeta / w)
    raw = rl - _dispersion_penalty(w, zeta, sb.q_eps, sb.ts)
    d_short = d - _dispersion_penalty_deriv(w, zeta, sb.q_eps, sb.ts)
    return np.where(raw > 0, d_short, 0.0)


def _ec_core(w, lb, lq, est, xi, sb, want_deriv):
    """Shared EC evaluation over a flat grid of (w, alpha, p) triples."""
    w_arr = np.asarray(w, dtype=float)
    alpha_arr = np.asarray(lb.h, dtype=float)
    p_arr = np.asarray(lb.p, dtype=float)
    shape = np.broadcast_shapes(w_arr.shape, alpha_arr.shape, p_arr.shape)
    w_f = np.broadcast_to(w_arr, shape).reshape(-1)
    alpha_f = np.broadcast_to(alpha_arr, shape).reshape(-1)
    p_f = np.broadcast_to(p_arr, shape).reshape(-1)
    zeta = (p_f[:, None] * alpha_f[:, None] * est.fading_draws[None, :]) / lb.n0
    rates = _rate_for_regime(w_f[:, None], zeta, xi, sb)
    a = -lq.theta * lq.tc * rates
    m = np.max(a, axis=1, keepdims=True)
    expa = np.exp(a - m)
    if want_deriv:
        derivs = _rate_deriv_for_regime(w_f[:, None], zeta, xi, sb)
        weights = expa / np.sum(expa, axis=1, keepdims=True)
        out = np.sum(weights * derivs, axis=1)
    else:
        out = -(m[:, 0] + np.log(np.mean(expa, axis=1))) / (lq.theta * lq.tc)
    out = out.reshape(shape)
    return float(out) if shape == () else out


def effective_capacity(w: ArrayLike, lb: LinkBudget, lq: LatencyQos,
                       est: EcEstimator, xi: Xi = Xi.LONG,
                       sb: ShortBlockParams = ShortBlockParams()) -> ArrayLike:
    """-(1/(theta Tc)) ln E_g[exp(-theta Tc r(w; alpha g))].

    lb.h holds the large-scale gain; the expectation runs over the fixed
    small-scale draws of the estimator. Evaluated with a log-sum-exp so
    rates of 1e8+ bps do not underflow the average.
    """
    _check_w(w)
    return _ec_core(w, lb, lq, est, xi, sb, want_deriv=False)


def reward(qos: QosKind, w: ArrayLike, lb: LinkBudget,
           sb: ShortBlockParams = ShortBlockParams(),
           lq: LatencyQos = LatencyQos(),
           est: Optional[EcEstimator] = None) -> ArrayLike:
    """Dispatch to the reward function selected by the QoS kind."""
    if qos.phi is Phi.DATA_RATE:
        return rate_long(w, lb) if qos.xi is Xi.LONG else rate_short(w, lb, sb)
    if qos.phi is Phi.SECRECY_RATE:
        if lb.h_e is None:
            raise ValueError("secrecy reward needs an eavesdropper gain")
        return secrecy_long(w, lb) if qos.xi is Xi.LONG else secrecy_short(w, lb, sb)
    if est is None:
        raise ValueError("effective capacity needs an estimator with fixed draws")
    return effective_capacity(w, lb, lq, est, qos.xi, sb)


def reward_derivative(qos: QosKind, w: ArrayLike, lb: LinkBudget,
                      sb: ShortBlockParams = ShortBlockParams(),
                      lq: LatencyQos = LatencyQos(),
                      est: Optional[EcEstimator] = None) -> ArrayLike:
    """Closed-form d reward / d w; subgradient 0 on clamped regions."""
    _check_w(w)
    w = np.asarray(w, dtype=float)
    if qos.phi is Phi.DATA_RATE:
        return _rate_deriv_for_regime(w, lb.zeta, qos.xi, sb)
    if qos.phi is Phi.SECRECY_RATE:
        zeta, zeta_e = lb.zeta, lb.zeta_e
        d = _rate_long_deriv_from_zeta(w, zeta) - _rate_long_deriv_from_zeta(w, zeta_e)
        if qos.xi is Xi.LONG:
            return np.where(zeta > zeta_e, d, 0.0)
        diff = (w / LN2) * (np.log1p(zeta / w) - np.log1p(zeta_e / w))
        raw = (diff - _dispersion_penalty(w, zeta, sb.q_eps, sb.ts)
               - _dispersion_penalty(w, zeta_e, sb.q_delta, sb.ts))
        d_short = (d - _dispersion_penalty_deriv(w, zeta, sb.q_eps, sb.ts)
                   - _dispersion_penalty_deriv(w, zeta_e, sb.q_delta, sb.ts))
        return np.where((zeta > zeta_e) & (raw > 0), d_short, 0.0)
    if est is None:
        raise ValueError("effective capacity needs an estimator with fixed draws")
    return _ec_core(w, lb, lq, est, qos.xi, sb, want_deriv=True)


def secrecy_long_second_derivative(w: ArrayLike, lb: LinkBudget) -> ArrayLike:
    """Closed-form d^2 r / d w^2 of the long-blocklength secrecy rate."""
    zeta, zeta_e = lb.zeta, lb.zeta_e
    num = (zeta_e - zeta) * ((zeta_e + zeta) * w + 2.0 * zeta_e * zeta)
    den = LN2 * (w + zeta) ** 2 * (w + zeta_e) ** 2
    return num / den


def check_concavity_secrecy_long(lb: LinkBudget, w_grid: np.ndarray) -> bool:
    """Appendix-style concavity check on a bandwidth grid.

    True iff the closed-form second derivative is negative everywhere on
    the grid and its sign agrees with a second central difference. Only
    defined for scheduled users (main link strictly stronger).
    """
    zeta = float(np.asarray(lb.zeta))
    zeta_e = float(np.asarray(lb.zeta_e))
    if zeta <= zeta_e:
        raise ValueError("concavity check requires h > h_e (scheduled user)")
    w = np.asarray(w_grid, dtype=float)
    d2 = secrecy_long_second_derivative(w, lb)
    if not np.all(d2 < 0):
        return False
    h = 0.25 * w
    fd = (secrecy_long(w + h, lb) - 2.0 * secrecy_long(w, lb)
          + secrecy_long(w - h, lb)) / h ** 2
    return bool(np.all(fd < 0))


def concave_region_bound(qos: QosKind, lb: LinkBudget,
                         sb: ShortBlockParams = ShortBlockParams(),
                         lq: LatencyQos = LatencyQos(),
                         est: Optional[EcEstimator] = None,
                         w_cap: float = 100e6, dw: float = 10e3,
                         tol: Tolerance = Tolerance()) -> float:
    """Largest w in [dw, w_cap] below which the reward is non-decreasing.

    Long-blocklength rewards grow everywhere, so the cap is returned
    directly. Short-blocklength rewards peak where the dispersion
    penalty's marginal cost overtakes the capacity gain; the crossing is
    located by doubling then bisection on the derivative sign.
    """
    zeta = float(np.max(np.asarray(lb.zeta)))
    if zeta <= 0.0:
        return dw
    if qos.xi is Xi.LONG:
        return w_cap

    def d(w):
        return float(np.asarray(reward_derivative(qos, w, lb, sb, lq, est)))

    if d(dw) < 0.0:
        return dw
    lo = dw
    hi = None
    w = dw
    while w < w_cap:
        w = min(2.0 * w, w_cap)
        if d(w) < 0.0:
            hi = w
            break
        lo = w
    if hi is None:
        return w_cap
    for _ in range(tol.max_iter):
        mid = 0.5 * (lo + hi)
        if hi - lo <= tol.rel_tol * mid:
            break
        if d(mid) >= 0.0:
            lo = mid
        else:
            hi = mid
    return lo


def link_budget(task: TaskSpec, sample: ChannelSample) -> LinkBudget:
    """Per-user link budgets for a sample, matched to the task's QoS kind.

    Effective-capacity kinds condition on the large-scale gain only; the
    small-scale part is marginalized by the estimator's fixed draws.
    """
    if task.qos.phi is Phi.EFFECTIVE_CAPACITY:
        h = sample.alpha
    else:
        h = sample.h
    h_e = sample.h_e if task.qos.needs_eavesdropper else None
    return LinkBudget(p=sample.tx_power_w, h=h, n0=sample.noise_w_per_hz, h_e=h_e)


@dataclass(frozen=True)
class RewardModel:
    """A QoS kind bound to its constants and (for EC) fixed fading draws.

    The single entry point used by the scheduler, the iterative
    allocator, and the training loss.
    """

    qos: QosKind
    sb: ShortBlockParams = ShortBlockParams()
    lq: LatencyQos = LatencyQos()
    est: Optional[EcEstimator] = None

    def __post_init__(self):
        if self.qos.phi is Phi.EFFECTIVE_CAPACITY and self.est is None:
            raise ValueError("effective-capacity model needs an EcEstimator")

    @staticmethod
    def for_task(task: TaskSpec, n_mc: int = 1000,
                 sb: ShortBlockParams = ShortBlockParams(),
                 lq: LatencyQos = LatencyQos()) -> "RewardModel":
        est = None
        if task.qos.phi is Phi.EFFECTIVE_CAPACITY:
            est = EcEstimator.for_task(task, n_mc)
        return RewardModel(task.qos, sb, lq, est)

    def reward(self, w: ArrayLike, lb: LinkBudget) -> ArrayLike:
        return reward(self.qos, w, lb, self.sb, self.lq, self.est)

    def reward_derivative(self, w: ArrayLike, lb: LinkBudget) -> ArrayLike:
        return reward_derivative(self.qos, w, lb, self.sb, self.lq, self.est)

    def concave_bound(self, lb: LinkBudget, w_cap: float, dw: float) -> float:
        return concave_region_bound(self.qos, lb, self.sb, self.lq, self.est,
                                    w_cap, dw)
