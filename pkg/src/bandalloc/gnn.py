"""Scalable allocator network and its hand-rolled backpropagation.

One small FNN is shared by every scheduled user (message passing), the
per-user scalar embeddings go through a softmax (aggregation), and the
readout maps the softmax weights back onto the feasible set: each user
receives its minimum bandwidth plus its share of the surplus. Parameter
count is therefore independent of the number of users, and permuting
users permutes the outputs identically.

The backward pass is written against this fixed three-stage graph; the
architecture is static, so a general autodiff tape would buy nothing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .allocation import OpCounters, ScheduleResult
from .numerics import RngStream
from .qos import LinkBudget, RewardModel

LAYER_SIZES_DEFAULT = (2, 32, 64, 32, 1)


@dataclass(frozen=True)
class FnnArchitecture:
    """Layer widths and hidden activation of the shared per-user FNN."""

    layer_sizes: tuple = LAYER_SIZES_DEFAULT
    hidden_activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError("layer sizes must be positive")
        if sizes[0] != 2:
            raise ValueError("input layer must have 2 units (w_min, w_S)")
        if sizes[-1] != 1:
            raise ValueError("output layer must be a scalar embedding")
        if self.hidden_activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.hidden_activation!r}")

    @property
    def num_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.layer_sizes,
                                               self.layer_sizes[1:]))

    @property
    def multiplies_per_user(self) -> int:
        return sum(a * b for a, b in zip(self.layer_sizes, self.layer_sizes[1:]))


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_deriv(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    return (z > 0).astype(float) if kind == "relu" else 1.0 - a * a


@dataclass(frozen=True)
class GnnParams:
    """Weight matrices (out x in, row-major) and bias vectors of the FNN."""

    arch: FnnArchitecture
    weights: tuple
    biases: tuple

    def __post_init__(self):
        sizes = self.arch.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("layer count mismatch")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise ValueError(f"shape mismatch in layer {i}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"non-finite parameters in layer {i}")

    @property
    def num_params(self) -> int:
        return self.arch.num_params

    def clone(self) -> "GnnParams":
        return GnnParams(self.arch, tuple(w.copy() for w in self.weights),
                         tuple(b.copy() for b in self.biases))

    def step(self, grads: "GnnParams", scale: float) -> "GnnParams":
        """Return self + scale * grads without mutating either."""
        ws = tuple(w + scale * g for w, g in zip(self.weights, grads.weights))
        bs = tuple(b + scale * g for b, g in zip(self.biases, grads.biases))
        return GnnParams(self.arch, ws, bs)

    def to_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.reshape(-1))
            parts.append(b)
        return np.concatenate(parts)

    def from_flat(self, flat: np.ndarray) -> "GnnParams":
        sizes = self.arch.layer_sizes
        ws, bs, pos = [], [], 0
        for i in range(len(sizes) - 1):
            n = sizes[i + 1] * sizes[i]
            ws.append(flat[pos:pos + n].reshape(sizes[i + 1], sizes[i]).copy())
            pos += n
            bs.append(flat[pos:pos + sizes[i + 1]].copy())
            pos += sizes[i + 1]
        return GnnParams(self.arch, tuple(ws), tuple(bs))


def zeros_like(params: GnnParams) -> GnnParams:
    return GnnParams(params.arch,
                     tuple(np.zeros_like(w) for w in params.weights),
                     tuple(np.zeros_like(b) for b in params.biases))


def accumulate(total: GnnParams, grads: GnnParams, scale: float = 1.0) -> GnnParams:
    return total.step(grads, scale)


def init_params(arch: FnnArchitecture = FnnArchitecture(),
                rng: RngStream = RngStream(0)) -> GnnParams:
    """Glorot-uniform weights, zero biases, deterministic per stream."""
    gen = rng.generator()
    sizes = arch.layer_sizes
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(gen.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return GnnParams(arch, tuple(ws), tuple(bs))


@dataclass(frozen=True)
class ForwardTrace:
    """Backpropagation workspace of one forward evaluation."""

    inputs: np.ndarray        # (K, 2)
    pre_acts: tuple           # per hidden layer, (K, m)
    acts: tuple               # per hidden layer, (K, m)
    logits: np.ndarray        # (K,)
    y: np.ndarray             # softmax outputs, (K,)
    w_tilde: np.ndarray       # normalized allocations, (K,)


def forward(params: GnnParams, sched: ScheduleResult,
            counters: Optional[OpCounters] = None) -> tuple[np.ndarray, ForwardTrace]:
    """Evaluate the allocator on one scheduled sample.

    Returns the normalized bandwidths w_tilde = y * w_S + w_min and the
    trace needed for backward().
    """
    k = sched.num_scheduled
    if k == 0:
        raise ValueError("forward needs a non-empty scheduled set")
    kind = params.arch.hidden_activation
    x = np.column_stack([sched.w_min_norm,
                         np.full(k, sched.surplus_norm)])
    pre_acts, acts = [], []
    a = x
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        if i < n_layers - 1:
            a = _act(z, kind)
            pre_acts.append(z)
            acts.append(a)
        else:
            a = z  # identity output
    logits = a[:, 0]
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    # fsum keeps the denominator invariant under user permutations, so
    # equivariance holds exactly in float arithmetic
    y = e / math.fsum(e)
    w_tilde = y * sched.surplus_norm + sched.w_min_norm
    if counters is not None:
        counters.fnn_multiplies += k * params.arch.multiplies_per_user
    trace = ForwardTrace(inputs=x, pre_acts=tuple(pre_acts), acts=tuple(acts),
                         logits=logits, y=y, w_tilde=w_tilde)
    return w_tilde, trace


def backward(params: GnnParams, trace: ForwardTrace, sched: ScheduleResult,
             model: RewardModel, lb: LinkBudget) -> GnnParams:
    """Exact gradient of sum_k r_k(w_tilde_k * W_tau) in the parameters.

    Chains the per-user reward derivative through the readout, the
    softmax Jacobian, and the shared FNN; gradients accumulate across
    users because the parameters are shared. lb must hold the scheduled
    users' budgets in trace order.
    """
    kind = params.arch.hidden_activation
    w_hz = trace.w_tilde * sched.w_tau
    dr_dw = np.atleast_1d(np.asarray(model.reward_derivative(w_hz, lb),
                                     dtype=float))
    dl_dwt = sched.w_tau * dr_dw                  # d loss / d w_tilde
    dl_dy = dl_dwt * sched.surplus_norm           # readout is affine in y
    y = trace.y
    dl_dx = y * (dl_dy - float(np.dot(dl_dy, y)))  # softmax Jacobian
    delta = dl_dx[:, None]                        # (K, 1) at output layer
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    for i in range(len(params.weights) - 1, -1, -1):
        a_prev = trace.acts[i - 1] if i > 0 else trace.inputs
        grads_w[i] = delta.T @ a_prev
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i]) * _act_deriv(
                trace.pre_acts[i - 1], trace.acts[i - 1], kind)
    return GnnParams(params.arch, tuple(grads_w), tuple(grads_b))


CHECKPOINT_ACTIVATIONS = {"relu", "tanh"}


def save_params(params: GnnParams) -> str:
    """Serialize to the checkpoint document (JSON text).

    Weights are stored row-major (out x in) at full decimal precision so
    save -> load -> save is byte-identical.
    """
    doc = {
        "layer_sizes": list(params.arch.layer_sizes),
        "activation": params.arch.hidden_activation,
        "layers": [{"w": w.reshape(-1).tolist(), "b": b.tolist()}
                   for w, b in zip(params.weights, params.biases)],
    }
    return json.dumps(doc, indent=1)


def load_params(text: str) -> GnnParams:
    """Parse and validate a checkpoint document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ValueError(f"malformed checkpoint document: {err}") from err
    for key in ("layer_sizes", "activation", "layers"):
        if key not in doc:
            raise ValueError(f"checkpoint missing field {key!r}")
    arch = FnnArchitecture(tuple(doc["layer_sizes"]), doc["activation"])
    sizes = arch.layer_sizes
    if len(doc["layers"]) != len(sizes) - 1:
        raise ValueError("checkpoint layer count does not match layer_sizes")
    ws, bs = [], []
    for i, layer in enumerate(doc["layers"]):
        out_n, in_n = sizes[i + 1], sizes[i]
        w = np.asarray(layer["w"], dtype=float)
        b = np.asarray(layer["b"], dtype=float)
        if w.size != out_n * in_n:
            raise ValueError(f"layer {i} weight size {w.size} != {out_n * in_n}")
        if b.size != out_n:
            raise ValueError(f"layer {i} bias size {b.size} != {out_n}")
        ws.append(w.reshape(out_n, in_n))
        bs.append(b)
    return GnnParams(arch, tuple(ws), tuple(bs))
