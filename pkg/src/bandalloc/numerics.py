"""Scalar math utilities shared by every other module.

Inverse Gaussian Q-function, unit conversions, bisection root finding,
finite differences, and the seeded random-stream contract.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

# Named sub-stream roles so independent parts of a run never share draws.
STREAM_TASKS = 0x7461736B        # task sampling
STREAM_CHANNELS = 0x6368616E     # channel sampling (training pools)
STREAM_EVAL = 0x6576616C         # held-out evaluation sampling
STREAM_PARAMS = 0x70617261       # parameter initialization
STREAM_BATCH = 0x62617463        # batch index selection
STREAM_EC = 0x65636472           # effective-capacity fading draws

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    """One splitmix64 step; cheap avalanche mixing for stream derivation."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngStream:
    """Immutable descriptor of one deterministic random stream.

    Streams are counter-based (Philox keyed on (seed, stream_id)), so two
    streams with identical fields produce identical sequences and distinct
    stream ids under the same seed are statistically independent.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64],
                       dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, *ids: int) -> "RngStream":
        """Derive an independent sub-stream by folding ids into stream_id."""
        sid = self.stream_id & _MASK64
        for i in ids:
            sid = _splitmix64(sid ^ _splitmix64(i & _MASK64))
        return RngStream(self.seed, sid)


@dataclass(frozen=True)
class Tolerance:
    """Convergence control for iterative scalar solvers.

    Bandwidths are O(1e8) Hz and rates O(1e7) bps, so the relative test
    usually dominates.
    """

    abs_tol: float = 1e-9
    rel_tol: float = 1e-9
    max_iter: int = 200

    def __post_init__(self):
        if not (math.isfinite(self.abs_tol) and self.abs_tol > 0):
            raise ValueError(f"abs_tol must be finite positive, got {self.abs_tol}")
        if not (math.isfinite(self.rel_tol) and self.rel_tol > 0):
            raise ValueError(f"rel_tol must be finite positive, got {self.rel_tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


DEFAULT_TOL = Tolerance()


class BracketError(ValueError):
    """bisect() was called without a sign change over the bracket."""


class ConvergenceError(RuntimeError):
    """Iteration budget exhausted; carries the best iterate found."""

    def __init__(self, message: str, best: float):
        super().__init__(message)
        self.best = best


def q_function(x: float) -> float:
    """Gaussian tail probability Q(x) = 0.5*erfc(x/sqrt(2))."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def inverse_q(p: float, tol: Tolerance = DEFAULT_TOL) -> float:
    """Inverse of the Gaussian Q-function by bisection.

    Exactness is preferred over speed: this is evaluated once per user
    configuration, not per training step. The bracket [0, 40] covers
    p down to ~1e-300; p > 1/2 is handled by symmetry.
    """
    if not (0.0 < p < 1.0):
        raise ValueError(f"inverse_q requires p in (0,1), got {p}")
    if p == 0.5:
        return 0.0
    if p > 0.5:
        return -inverse_q(1.0 - p, tol)
    lo, hi = 0.0, 40.0
    for _ in range(max(tol.max_iter, 120)):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if q_function(mid) > p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def dbm_to_watts(p_dbm: float) -> float:
    """Convert a power level in dBm to watts."""
    return 10.0 ** (p_dbm / 10.0) / 1000.0


def bisect(f: Callable[[float], float], lo: float, hi: float, target: float,
           tol: Tolerance = DEFAULT_TOL) -> float:
    """Find x in [lo, hi] with f(x) = target for monotone f.

    Stops when |f(x) - target| <= abs_tol or the interval width falls
    below rel_tol * |x|. Raises BracketError if (f(lo)-target) and
    (f(hi)-target) do not have opposite signs, ConvergenceError (carrying
    the best iterate) if max_iter halvings are not enough.
    """
    flo = f(lo) - target
    fhi = f(hi) - target
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0.0:
        raise BracketError(
            f"no sign change on [{lo}, {hi}]: f-target = ({flo}, {fhi})")
    for _ in range(tol.max_iter):
        mid = 0.5 * (lo + hi)
        fmid = f(mid) - target
        if abs(fmid) <= tol.abs_tol or (hi - lo) <= tol.rel_tol * abs(mid):
            return mid
        if (fmid > 0.0) == (fhi > 0.0):
            hi, fhi = mid, fmid
        else:
            lo, flo = mid, fmid
    best = 0.5 * (lo + hi)
    raise ConvergenceError(
        f"bisect did not converge in {tol.max_iter} iterations", best)


def central_diff(f: Callable[[float], float], x: float, h: float) -> float:
    """Central finite difference (f(x+h) - f(x-h)) / (2h)."""
    return (f(x + h) - f(x - h)) / (2.0 * h)


def second_central_diff(f: Callable[[float], float], x: float, h: float) -> float:
    """Second-order central difference (f(x+h) - 2f(x) + f(x-h)) / h^2."""
    return (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
