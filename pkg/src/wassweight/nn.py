"""Small dense network engine: forward, hand-derived backward, Adam/SGD.

Everything is float64 numpy. A batch is an ``(n, features)`` array.
A softmax output layer is always paired with cross-entropy, so its backward
pass takes the gradient with respect to the logits (``p - y`` scaled), not
with respect to the probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError, NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh", "linear", "softmax")
LOG_EPS = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigurationError(f"layer dims must be >= 1, got {self.input_dim}->{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    def to_dict(self):
        return {"input_dim": self.input_dim, "output_dim": self.output_dim, "activation": self.activation}


def chain_specs(dims: Sequence[int], hidden: str = "relu", output: str = "linear") -> list[LayerSpec]:
    """Build specs for ``dims[0] -> dims[1] -> ... -> dims[-1]``."""
    if len(dims) < 2:
        raise ConfigurationError("need at least input and output dims")
    specs = []
    for k in range(len(dims) - 1):
        act = output if k == len(dims) - 2 else hidden
        specs.append(LayerSpec(int(dims[k]), int(dims[k + 1]), act))
    return specs


def validate_specs(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ConfigurationError("at least one layer required")
    for k in range(len(specs) - 1):
        if specs[k].output_dim != specs[k + 1].input_dim:
            raise ConfigurationError(
                f"layer {k} outputs {specs[k].output_dim} but layer {k + 1} expects {specs[k + 1].input_dim}"
            )
        if specs[k].activation == "softmax":
            raise ConfigurationError("softmax is only allowed on the final layer")


@dataclass
class MlpParams:
    """Weights are stored ``(input_dim, output_dim)`` so a layer is ``x @ W + b``."""

    specs: tuple
    weights: list
    biases: list
    seed: int | None = None

    def __post_init__(self):
        self.specs = tuple(self.specs)
        validate_specs(self.specs)
        if len(self.weights) != len(self.specs) or len(self.biases) != len(self.specs):
            raise ShapeError("one weight matrix and bias vector per layer required")
        for k, (spec, w, b) in enumerate(zip(self.specs, self.weights, self.biases)):
            if w.shape != (spec.input_dim, spec.output_dim) or b.shape != (spec.output_dim,):
                raise ShapeError(f"layer {k}: parameter shapes {w.shape}, {b.shape} do not match {spec}")

    @property
    def input_dim(self) -> int:
        return self.specs[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.specs[-1].output_dim

    def copy(self) -> "MlpParams":
        return MlpParams(self.specs, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.seed)

    def arrays(self):
        """Yield ``(name, array)`` pairs in a fixed order."""
        for k in range(len(self.specs)):
            yield f"W{k}", self.weights[k]
            yield f"b{k}", self.biases[k]

    def to_dict(self):
        return {
            "seed": self.seed,
            "layers": [
                {**s.to_dict(), "weight": w.tolist(), "bias": b.tolist()}
                for s, w, b in zip(self.specs, self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, d) -> "MlpParams":
        specs, ws, bs = [], [], []
        for layer in d["layers"]:
            spec = LayerSpec(layer["input_dim"], layer["output_dim"], layer["activation"])
            specs.append(spec)
            ws.append(np.asarray(layer["weight"], dtype=np.float64).reshape(spec.input_dim, spec.output_dim))
            bs.append(np.asarray(layer["bias"], dtype=np.float64).reshape(spec.output_dim))
        return cls(tuple(specs), ws, bs, d.get("seed"))


def init_params(specs: Sequence[LayerSpec], seed: int) -> MlpParams:
    """Fan-in scaled uniform weights, zero biases.

    relu layers use the He bound ``sqrt(6 / fan_in)``; every other activation
    uses the LeCun bound ``sqrt(3 / fan_in)``. Layers are drawn in order from a
    single ``default_rng(seed)``, so identical (seed, specs) give identical
    parameters.
    """
    specs = tuple(specs)
    validate_specs(specs)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for spec in specs:
        gain = 6.0 if spec.activation == "relu" else 3.0
        bound = np.sqrt(gain / spec.input_dim)
        weights.append(rng.uniform(-bound, bound, size=(spec.input_dim, spec.output_dim)))
        biases.append(np.zeros(spec.output_dim))
    return MlpParams(specs, weights, biases, seed)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    if activation == "softmax":
        return softmax(z)
    return z


@dataclass
class ForwardCache:
    params: MlpParams
    inputs: list = field(default_factory=list)  # input to each layer
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)


def as_batch(x, cols=None, what="batch") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2:
        raise ShapeError(f"{what} must be 2-D, got shape {x.shape}")
    if cols is not None and x.shape[1] != cols:
        raise ShapeError(f"{what} has {x.shape[1]} columns, expected {cols}")
    return x


def forward(params: MlpParams, batch) -> tuple[np.ndarray, ForwardCache]:
    x = as_batch(batch, params.input_dim)
    cache = ForwardCache(params)
    for k, (spec, w, b) in enumerate(zip(params.specs, params.weights, params.biases)):
        cache.inputs.append(x)
        with np.errstate(over="ignore", invalid="ignore"):
            z = x @ w + b
            a = _activate(z, spec.activation)
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite activation in layer {k} ({spec.activation})")
        cache.pre.append(z)
        cache.post.append(a)
        x = a
    return x, cache


@dataclass
class Gradients:
    weights: list
    biases: list

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scaled(self, k: float) -> "Gradients":
        return Gradients([k * w for w in self.weights], [k * b for b in self.biases])

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "Gradients":
        return cls([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])


def backward(params: MlpParams, cache: ForwardCache, output_grad) -> tuple[Gradients, np.ndarray]:
    """Return parameter gradients and the gradient with respect to the batch.

    ``output_grad`` is dL/d(output) for relu/tanh/linear outputs and
    dL/d(logits) for a softmax output.
    """
    if cache.params is not params or len(cache.pre) != len(params.specs):
        raise RuntimeError("forward cache does not belong to these parameters")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != cache.post[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {cache.post[-1].shape}")
    n_layers = len(params.specs)
    gw, gb = [None] * n_layers, [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        act = params.specs[k].activation
        if act == "relu":
            g = g * (cache.pre[k] > 0.0)
        elif act == "tanh":
            g = g * (1.0 - cache.post[k] ** 2)
        gw[k] = cache.inputs[k].T @ g
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k].T
    return Gradients(gw, gb), g


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy_loss(probs, onehot, sample_weights=None, normalizer=None) -> tuple[float, np.ndarray]:
    """Weighted cross-entropy of softmax outputs against one-hot labels.

    loss = sum_n w_n * -log(p_n[y_n] + 1e-12) / normalizer, with the normalizer
    defaulting to the row count. The returned gradient is with respect to the
    softmax *input*: w_n * (p_n - y_n) / normalizer.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 2:
        raise ShapeError(f"probability shape {p.shape} != label shape {y.shape}")
    n = p.shape[0]
    if not (np.all((y == 0.0) | (y == 1.0)) and np.all(y.sum(axis=1) == 1.0)):
        bad = int(np.flatnonzero(~(np.all((y == 0.0) | (y == 1.0), axis=1) & (y.sum(axis=1) == 1.0)))[0])
        raise DataError(f"label row {bad} is not one-hot")
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeError(f"expected {n} sample weights, got shape {w.shape}")
    if np.any(w < 0):
        raise ConfigurationError("sample weights must be nonnegative")
    norm = float(n if normalizer is None else normalizer)
    per_sample = -np.log(np.sum(p * y, axis=1) + LOG_EPS)
    loss = float(np.sum(w * per_sample) / norm)
    grad = w[:, None] * (p - y) / norm
    return loss, grad


@dataclass
class OptimizerState:
    lr: float
    m: list
    v: list
    step: int = 0
    method: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: MlpParams, lr: float = 1e-3, method: str = "adam") -> OptimizerState:
    if lr < 0:
        raise ConfigurationError("learning rate must be nonnegative")
    if method not in ("adam", "sgd"):
        raise ConfigurationError(f"unknown optimizer {method!r}")
    zeros = [np.zeros_like(a) for _, a in params.arrays()]
    return OptimizerState(lr, zeros, [z.copy() for z in zeros], 0, method)


def optimizer_step(params: MlpParams, grads: Gradients, state: OptimizerState):
    """Apply one update; returns new ``(params, state)`` and leaves inputs untouched."""
    flat_g = []
    for k in range(len(params.specs)):
        for name, g, ref in ((f"W{k}", grads.weights[k], params.weights[k]), (f"b{k}", grads.biases[k], params.biases[k])):
            if g.shape != ref.shape:
                raise ShapeError(f"gradient {name} shape {g.shape} != parameter shape {ref.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in layer {k} ({name})")
            flat_g.append(g)
    step = state.step + 1
    new_arrays, new_m, new_v = [], [], []
    for (_, p), g, m, v in zip(params.arrays(), flat_g, state.m, state.v):
        if state.method == "sgd":
            new_arrays.append(p - state.lr * g)
            new_m.append(m)
            new_v.append(v)
            continue
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**step)
        v_hat = v / (1.0 - state.beta2**step)
        new_arrays.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_params = MlpParams(params.specs, new_arrays[0::2], new_arrays[1::2], params.seed)
    new_state = OptimizerState(state.lr, new_m, new_v, step, state.method, state.beta1, state.beta2, state.eps)
    return new_params, new_state
