"""Dense numeric kernel: small MLPs with hand-written gradients, Adam, and
numerically stable reductions.

All learnable tensors are float32 numpy arrays (weights row-major, shape
(out, in)); forward/backward accept a single vector or a batch of row
vectors. Everything is deterministic given the seed that initialized it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, TrainingError
from .rng import generator

ACTIVATIONS = ("silu", "relu", "identity")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid exp overflow on large negative inputs
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "silu":
        return z * _sigmoid(z)
    raise ConfigError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def _activate_grad(name: str, z: np.ndarray) -> np.ndarray:
    """Derivative of the activation w.r.t. its pre-activation input z."""
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "silu":
        s = _sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    raise ConfigError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


@dataclass
class Layer:
    """One affine layer y = activation(W x + b), W shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class Mlp:
    """A stack of Layers with chained dimensions."""

    layers: list[Layer]

    def __post_init__(self) -> None:
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(
                    f"layer dimensions do not chain: out={a.out_dim} feeds in={b.in_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


def mlp_init(
    dims: list[int],
    seed: int,
    *tags: object,
    hidden_activation: str = "silu",
    final_activation: str = "identity",
) -> Mlp:
    """Build an MLP with the given layer widths, seeded deterministically.

    ``dims = [in, h1, ..., out]``; hidden layers use ``hidden_activation``,
    the last layer ``final_activation``. Weights ~ N(0, 1/sqrt(fan_in)).
    """
    if len(dims) < 2:
        raise ConfigError("an MLP needs at least an input and an output width")
    layers = []
    for i, (din, dout) in enumerate(zip(dims, dims[1:])):
        rng = generator(seed, *tags, "layer", i)
        w = (rng.standard_normal((dout, din)) / np.sqrt(din)).astype(np.float32)
        b = np.zeros(dout, dtype=np.float32)
        act = final_activation if i == len(dims) - 2 else hidden_activation
        layers.append(Layer(w, b, act))
    return Mlp(layers)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ShapeError(f"expected a vector or batch of vectors, got ndim={x.ndim}")


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a vector (or rows of a batch)."""
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != net.in_dim:
        raise ShapeError(f"input has dim {xb.shape[1]}, network expects {net.in_dim}")
    h = xb
    for layer in net.layers:
        h = _activate(layer.activation, h @ layer.weight.T + layer.bias)
    return h[0] if squeeze else h


def mlp_forward_cached(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass that also returns per-layer (input, pre-activation) caches."""
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != net.in_dim:
        raise ShapeError(f"input has dim {xb.shape[1]}, network expects {net.in_dim}")
    cache = []
    h = xb
    for layer in net.layers:
        z = h @ layer.weight.T + layer.bias
        cache.append((h, z))
        h = _activate(layer.activation, z)
    return (h[0] if squeeze else h), cache


def mlp_backward_cached(
    net: Mlp, cache: list, output_grad: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backprop through a cached forward pass.

    Returns ([(dW, db) per layer], input_grad). ``output_grad`` is the loss
    gradient at the network output, one row per cached batch row.
    """
    g, squeeze = _as_batch(output_grad)
    if g.shape != (cache[-1][1].shape[0], net.out_dim):
        raise ShapeError(
            f"output_grad shape {g.shape} does not match forward batch "
            f"({cache[-1][1].shape[0]}, {net.out_dim})"
        )
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        h_in, z = cache[i]
        gz = g * _activate_grad(layer.activation, z)
        grads[i] = (gz.T @ h_in, gz.sum(axis=0))
        g = gz @ layer.weight
    return grads, (g[0] if squeeze else g)


def mlp_backward(
    net: Mlp, x: np.ndarray, output_grad: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Gradient of a scalar loss w.r.t. every weight, bias, and the input."""
    _, cache = mlp_forward_cached(net, x)
    return mlp_backward_cached(net, cache, output_grad)


def mlp_named(prefix: str, net: Mlp) -> dict[str, np.ndarray]:
    """Name the network's tensors for the optimizer/checkpoint registry."""
    out: dict[str, np.ndarray] = {}
    for i, layer in enumerate(net.layers):
        out[f"{prefix}.w{i}"] = layer.weight
        out[f"{prefix}.b{i}"] = layer.bias
    return out


def mlp_grads_named(
    prefix: str, grads: list[tuple[np.ndarray, np.ndarray]]
) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for i, (gw, gb) in enumerate(grads):
        out[f"{prefix}.w{i}"] = gw
        out[f"{prefix}.b{i}"] = gb
    return out


def accumulate_grads(total: dict[str, np.ndarray], part: dict[str, np.ndarray]) -> None:
    """Sum a partial gradient dict into a running total, in place."""
    for name, g in part.items():
        if name in total:
            total[name] = total[name] + g
        else:
            total[name] = g


@dataclass
class AdamState:
    """Adam moment buffers for a named set of parameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: dict[str, np.ndarray], lr: float = 1e-3) -> AdamState:
    state = AdamState(lr=lr)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> None:
    """One Adam update, in place on the parameter arrays.

    Only parameter names present in ``state`` buffers are updated; a missing
    gradient counts as zero. Non-finite gradients abort the step.
    """
    state.step += 1
    t = state.step
    bc1 = np.float32(1.0 - state.beta1**t)
    bc2 = np.float32(1.0 - state.beta2**t)
    b1 = np.float32(state.beta1)
    b2 = np.float32(state.beta2)
    lr = np.float32(state.lr)
    eps = np.float32(state.eps)
    for name in state.m:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name])
        else:
            g = np.asarray(g, dtype=np.float32)
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not mirror parameter "
                f"{name!r} shape {params[name].shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (np.float32(1.0) - b1) * g
        v *= b2
        v += (np.float32(1.0) - b2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        params[name] -= update


def stable_log_sum_exp(values: np.ndarray) -> float:
    """log(sum(exp(values))) with max-subtraction; safe for values up to ±1e4."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ShapeError("stable_log_sum_exp needs a non-empty vector")
    m = float(v.max())
    return m + float(np.log(np.exp(v - m).sum()))


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Return x / ||x||, float32; raises on zero norm."""
    from .errors import NumericError

    x = np.asarray(x, dtype=np.float32)
    n = float(np.linalg.norm(x))
    if n == 0.0 or not np.isfinite(n):
        raise NumericError("cannot normalize a zero or non-finite vector")
    return (x / np.float32(n)).astype(np.float32)
