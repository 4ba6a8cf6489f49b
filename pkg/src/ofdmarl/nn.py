"""Minimal dense neural-network machinery on float64 numpy.

Forward/backward passes for affine+ReLU stacks, the Huber loss, SGD/Adam,
a trainable embedding table, and a central-finite-difference gradient
verifier. Inputs may be single vectors ``(in,)`` or row-batches ``(n, in)``;
parameter gradients are summed over batch rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ofdmarl.errors import ActionError, NumericError, ShapeError, StaleCacheError

ACTIVATIONS = ("relu", "linear")


@dataclass
class Layer:
    w: np.ndarray               # (out, in)
    b: np.ndarray               # (out,)
    activation: str = "relu"


@dataclass
class Mlp:
    layers: list[Layer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].w.shape[0]


def init_mlp(dims: list[int] | tuple[int, ...], rng: np.random.Generator,
             output_activation: str = "linear") -> Mlp:
    """Glorot-uniform weights, zero biases; hidden layers ReLU."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        act = output_activation if i == len(dims) - 2 else "relu"
        layers.append(Layer(
            w=rng.uniform(-bound, bound, size=(fan_out, fan_in)),
            b=np.zeros(fan_out),
            activation=act,
        ))
    return Mlp(layers)


@dataclass
class ForwardCache:
    mlp: Mlp
    inputs: list[np.ndarray] = field(default_factory=list)     # X per layer
    preacts: list[np.ndarray] = field(default_factory=list)    # Z per layer
    squeeze: bool = False


def _as_rows(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ShapeError(f"expected 1-D or 2-D input, got shape {x.shape}")


def mlp_forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    rows, squeeze = _as_rows(x)
    if rows.shape[1] != mlp.input_dim:
        raise ShapeError(
            f"input width {rows.shape[1]} != layer width {mlp.input_dim}")
    cache = ForwardCache(mlp=mlp, squeeze=squeeze)
    h = rows
    for layer in mlp.layers:
        cache.inputs.append(h)
        z = h @ layer.w.T + layer.b
        cache.preacts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return (h[0] if squeeze else h), cache


def mlp_backward(mlp: Mlp, cache: ForwardCache,
                 grad_y: np.ndarray) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Gradients of sum(y * grad_y) w.r.t. every layer's (w, b) and the input."""
    if cache.mlp is not mlp:
        raise StaleCacheError("cache does not belong to this network")
    grad_rows, _ = _as_rows(grad_y)
    if grad_rows.shape != (cache.preacts[-1].shape[0], mlp.output_dim):
        raise ShapeError(
            f"grad_y shape {grad_rows.shape} does not match forward output "
            f"{(cache.preacts[-1].shape[0], mlp.output_dim)}")

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(mlp.layers)
    upstream = grad_rows
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[i]
        z, x_in = cache.preacts[i], cache.inputs[i]
        dz = upstream * (z > 0.0) if layer.activation == "relu" else upstream
        grads[i] = (dz.T @ x_in, dz.sum(axis=0))
        upstream = dz @ layer.w
    grad_x = upstream[0] if cache.squeeze else upstream
    return grads, grad_x


def huber(pred, target, delta: float = 1.0):
    """Elementwise Huber loss and d(loss)/d(pred).

    loss = e^2/2 for |e| <= delta, else delta*(|e| - delta/2), e = pred - target.
    """
    if delta <= 0:
        raise ValueError("delta must be > 0")
    e = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    abs_e = np.abs(e)
    quadratic = abs_e <= delta
    loss = np.where(quadratic, 0.5 * e * e, delta * (abs_e - 0.5 * delta))
    dpred = np.where(quadratic, e, delta * np.sign(e))
    if loss.ndim == 0:
        return float(loss), float(dpred)
    return loss, dpred


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    rows: np.ndarray            # (n_entries, dim)

    def lookup(self, index: int) -> np.ndarray:
        n = self.rows.shape[0]
        if not 0 <= index < n:
            raise ActionError(f"embedding index {index} outside [0, {n - 1}]")
        return self.rows[index]


def init_embedding(n_entries: int, dim: int, rng: np.random.Generator,
                   scale: float = 0.05) -> EmbeddingTable:
    return EmbeddingTable(rows=rng.uniform(-scale, scale, size=(n_entries, dim)))


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    method: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(opt: OptimizerState, params: dict[str, np.ndarray],
                   grads: dict[str, np.ndarray]) -> None:
    """One in-place descent step on every named tensor.

    Raises NumericError (naming the offending tensor) before touching any
    parameter if a gradient is non-finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown tensor {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape mismatch for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name!r}")

    opt.step += 1
    if opt.method == "sgd":
        for name, g in grads.items():
            params[name] -= opt.learning_rate * g
        return
    if opt.method != "adam":
        raise ValueError(f"unknown optimizer {opt.method!r}")

    b1, b2 = opt.beta1, opt.beta2
    bias1 = 1.0 - b1 ** opt.step
    bias2 = 1.0 - b2 ** opt.step
    for name, g in grads.items():
        m = opt.m.setdefault(name, np.zeros_like(params[name]))
        v = opt.v.setdefault(name, np.zeros_like(params[name]))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        params[name] -= opt.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + opt.eps)


# ---------------------------------------------------------------------------
# finite-difference gradient verification
# ---------------------------------------------------------------------------


def grad_check(loss_fn, tensors: dict[str, np.ndarray],
               analytic: dict[str, np.ndarray], *, eps: float = 1e-5,
               max_probes: int = 10_000,
               rng: np.random.Generator | None = None) -> float:
    """Worst relative error between analytic gradients and central differences.

    ``loss_fn()`` must recompute the scalar loss from the current tensor
    values (tensors are perturbed in place and restored). Every entry is
    probed unless the total parameter count exceeds ``max_probes``, in which
    case a uniform random subsample of that size is probed instead.
    """
    entries = [(name, idx) for name, t in tensors.items()
               for idx in np.ndindex(t.shape)]
    if len(entries) > max_probes:
        picker = rng if rng is not None else np.random.default_rng(0)
        chosen = picker.choice(len(entries), size=max_probes, replace=False)
        entries = [entries[i] for i in sorted(chosen)]

    worst = 0.0
    for name, idx in entries:
        t = tensors[name]
        original = t[idx]
        t[idx] = original + eps
        plus = loss_fn()
        t[idx] = original - eps
        minus = loss_fn()
        t[idx] = original
        fd = (plus - minus) / (2.0 * eps)
        an = analytic[name][idx]
        denom = max(abs(fd), abs(an))
        worst = max(worst, abs(fd - an) / denom if denom > 1e-10 else 0.0)
    return worst
