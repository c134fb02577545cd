"""Minimal dense-network training core.

Plain numpy float64 throughout: tight gradient-check tolerances and
bit-exact equality assertions elsewhere in the simulator depend on it.
All functions are pure except `adam_step`, which mutates the parameter
arrays and optimizer state it is handed.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("linear", "relu", "sigmoid")

PROB_CLAMP = 1e-12


class ShapeError(ValueError):
    """Input rejected because its shape does not match the model."""


class StateError(ValueError):
    """Operation rejected because of a stale or mismatched state argument."""


def _apply_activation(name, z):
    if name == "linear":
        return z
    if name == "relu":
        return np.maximum(0.0, z)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name, z, a):
    # derivative of activation wrt z, using cached pre/post values
    if name == "linear":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "sigmoid":
        return a * (1.0 - a)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    """Fully connected layer: y = act(x @ W.T + b)."""

    weights: np.ndarray  # [out, in]
    bias: np.ndarray     # [out]
    activation: str = "linear"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError("weights must be 2-D [out, in]")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("bias shape must match weight rows")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]

    @property
    def out_width(self) -> int:
        return self.weights.shape[0]


@dataclass
class SequentialModel:
    """Ordered dense-layer stack. An empty stack acts as the identity
    (needed for vanilla split configurations with no client tail)."""

    layers: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_width != nxt.in_width:
                raise ShapeError("layer widths do not chain")

    @property
    def in_width(self) -> int | None:
        return self.layers[0].in_width if self.layers else None

    @property
    def out_width(self) -> int | None:
        return self.layers[-1].out_width if self.layers else None

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in canonical order: W0, b0, W1, b1, ..."""
        params = []
        for layer in self.layers:
            params.append(layer.weights)
            params.append(layer.bias)
        return params

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def clone(self) -> "SequentialModel":
        return copy.deepcopy(self)


def models_equal(a: SequentialModel, b: SequentialModel) -> bool:
    """Bit-exact structural and parameter equality."""
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.activation != lb.activation:
            return False
        if la.weights.shape != lb.weights.shape:
            return False
        if not np.array_equal(la.weights, lb.weights):
            return False
        if not np.array_equal(la.bias, lb.bias):
            return False
    return True


def init_model(widths: list[int], seed: int, hidden_activation: str = "relu") -> SequentialModel:
    """Deterministic Glorot-uniform init, zero biases, sigmoid output head.

    widths = [d_in, h1, ..., 1]; the final layer always gets a sigmoid
    activation so the model is a binary classifier.
    """
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    if widths[-1] != 1:
        raise ValueError("classifier head must have output width 1")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (w_in, w_out) in enumerate(zip(widths, widths[1:])):
        bound = np.sqrt(6.0 / (w_in + w_out))
        weights = rng.uniform(-bound, bound, size=(w_out, w_in))
        bias = np.zeros(w_out)
        last = i == len(widths) - 2
        layers.append(DenseLayer(weights, bias, "sigmoid" if last else hidden_activation))
    return SequentialModel(layers)


def forward(model: SequentialModel, x: np.ndarray):
    """Run the model on a batch; returns (output, cache).

    cache holds the layer inputs and pre/post activations needed by
    `backward`. An empty model is the identity.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("input must be 2-D [n, features]")
    if model.layers and x.shape[1] != model.in_width:
        raise ShapeError(
            f"input width {x.shape[1]} != model input width {model.in_width}")
    cache = {"input": x, "pre": [], "post": [], "n_layers": len(model.layers)}
    a = x
    for layer in model.layers:
        z = a @ layer.weights.T + layer.bias
        a = _apply_activation(layer.activation, z)
        cache["pre"].append(z)
        cache["post"].append(a)
    return a, cache


def backward(model: SequentialModel, cache, out_grad: np.ndarray):
    """Backprop through the model; returns (param_grads, input_grad).

    param_grads mirrors model.parameters() order. cache must come from a
    matching forward call on this model.
    """
    if cache.get("n_layers") != len(model.layers):
        raise StateError("cache does not match model (stale or wrong model)")
    out_grad = np.asarray(out_grad, dtype=np.float64)
    if model.layers and out_grad.shape != cache["post"][-1].shape:
        raise StateError("out_grad shape does not match cached forward output")
    if not model.layers and out_grad.shape != cache["input"].shape:
        raise StateError("out_grad shape does not match cached forward output")

    grads: list[np.ndarray] = [None] * (2 * len(model.layers))
    da = out_grad
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        z = cache["pre"][i]
        a = cache["post"][i]
        x_in = cache["input"] if i == 0 else cache["post"][i - 1]
        dz = da * _activation_grad(layer.activation, z, a)
        grads[2 * i] = dz.T @ x_in          # dW
        grads[2 * i + 1] = dz.sum(axis=0)   # db
        da = dz @ layer.weights             # d input of this layer
    return grads, da


def bce_loss(probs: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy and its gradient wrt probs.

    probs is [n, 1] in (0, 1); labels is [n] with values in {0, 1}.
    Probabilities are clamped to [1e-12, 1 - 1e-12] before the logs.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != 1:
        raise ShapeError("probs must be [n, 1]")
    if labels.shape != (probs.shape[0],):
        raise ShapeError("labels must be [n] matching probs")
    n = probs.shape[0]
    p = np.clip(probs[:, 0], PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = labels
    loss = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))
    grad = ((p - y) / (p * (1.0 - p)) / n).reshape(n, 1)
    return loss, grad


@dataclass
class AdamState:
    """Adam moments for one parameter list; shapes mirror the parameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-4, **kw) -> "AdamState":
        return cls(lr=lr,
                   m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params],
                   **kw)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """Standard Adam update with bias correction; mutates params and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and state sizes disagree")
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError("parameter/gradient/moment shape mismatch")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def flatten_params(model: SequentialModel) -> np.ndarray:
    """Concatenate all parameters into one rank-1 vector, canonical order."""
    params = model.parameters()
    if not params:
        return np.zeros(0)
    return np.concatenate([p.ravel() for p in params])


def unflatten_params(model: SequentialModel, vec: np.ndarray) -> None:
    """Write a flat vector back into the model's parameters in place."""
    if vec.size != model.param_count():
        raise ShapeError("flat vector length does not match model")
    off = 0
    for p in model.parameters():
        p[...] = vec[off:off + p.size].reshape(p.shape)
        off += p.size
