"""Small fully-connected classifier with hand-written backprop.

Parameters are stored as a list of ``(W, b)`` pairs with ``W`` shaped
``(out, in)``. The last pair is the output layer, so row ``j`` of its
weight matrix is the weight vector feeding the logit of class ``j``.
Everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError


@dataclass
class ModelParams:
    layers: list[tuple[np.ndarray, np.ndarray]]

    @property
    def architecture(self) -> list[int]:
        sizes = [self.layers[0][0].shape[1]]
        sizes.extend(w.shape[0] for w, _ in self.layers)
        return sizes

    @property
    def shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        return [(w.shape, b.shape) for w, b in self.layers]

    @property
    def final_weights(self) -> np.ndarray:
        return self.layers[-1][0]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def copy(self) -> "ModelParams":
        return ModelParams([(w.copy(), b.copy()) for w, b in self.layers])

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in self.layers])

    def zeros_like(self) -> "ModelParams":
        return ModelParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers])

    def _check_compatible(self, other: "ModelParams") -> None:
        if self.shapes != other.shapes:
            raise ShapeError(f"architecture mismatch: {self.shapes} vs {other.shapes}")

    def __add__(self, other: "ModelParams") -> "ModelParams":
        self._check_compatible(other)
        return ModelParams([(w1 + w2, b1 + b2) for (w1, b1), (w2, b2) in zip(self.layers, other.layers)])

    def __sub__(self, other: "ModelParams") -> "ModelParams":
        self._check_compatible(other)
        return ModelParams([(w1 - w2, b1 - b2) for (w1, b1), (w2, b2) in zip(self.layers, other.layers)])

    def __mul__(self, scalar: float) -> "ModelParams":
        s = float(scalar)
        return ModelParams([(s * w, s * b) for w, b in self.layers])

    __rmul__ = __mul__


# Gradients live in the same container as the parameters they belong to.
GradientSet = ModelParams

# A regularizer maps the current parameters to (penalty, gradient of penalty).
RegularizerHook = Callable[[ModelParams], "tuple[float, GradientSet]"]


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.inputs.shape[0] < 1:
            raise ShapeError("batch must contain at least one sample")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            )
        if self.labels.min() < 0:
            raise ShapeError("labels must be non-negative")


def init_params(architecture: Sequence[int], seed: int | np.random.Generator) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    sizes = [int(a) for a in architecture]
    if len(sizes) < 2:
        raise ConfigError(f"architecture needs at least input and output sizes, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ConfigError(f"layer sizes must be positive, got {sizes}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return ModelParams(layers)


def forward(params: ModelParams, inputs: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return logits and the list of layer inputs needed for backprop.

    ``cache[k]`` is the input to layer ``k`` (after ReLU for hidden layers).
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layers[0][0].shape[1]:
        raise ShapeError(
            f"input shape {x.shape} does not match input dim {params.layers[0][0].shape[1]}"
        )
    cache = []
    h = x
    last = len(params.layers) - 1
    for k, (w, b) in enumerate(params.layers):
        cache.append(h)
        z = h @ w.T + b
        h = z if k == last else np.maximum(z, 0.0)
    return h, cache


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss_and_grad(
    params: ModelParams, batch: Batch, reg: Optional[RegularizerHook] = None
) -> tuple[float, GradientSet]:
    """Mean cross-entropy over the batch plus the optional penalty, and its exact gradient."""
    if batch.labels.max() >= params.num_classes:
        raise ShapeError(f"label {batch.labels.max()} out of range for {params.num_classes} classes")
    logits, cache = forward(params, batch.inputs)
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(n), batch.labels].mean())

    delta = np.exp(logp)
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for k in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[k]
        h = cache[k]
        grads.append((delta.T @ h, delta.sum(axis=0)))
        if k > 0:
            # cache[k] is relu(z_{k-1}); its positivity is the ReLU mask
            delta = (delta @ w) * (h > 0)
    grads.reverse()
    total = ModelParams(grads)

    if reg is not None:
        penalty, reg_grad = reg(params)
        loss = loss + float(penalty)
        total = total + reg_grad

    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss}")
    return loss, total


def sgd_step(params: ModelParams, grads: GradientSet, lr: float) -> ModelParams:
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if params.shapes != grads.shapes:
        raise ShapeError(f"gradient shapes {grads.shapes} do not match params {params.shapes}")
    return ModelParams([(w - lr * gw, b - lr * gb) for (w, b), (gw, gb) in zip(params.layers, grads.layers)])


def linear_combine(models: Sequence[ModelParams], coefficients: Sequence[float]) -> ModelParams:
    """Return sum_k coefficients[k] * models[k], accumulated in list order."""
    if len(models) == 0:
        raise ValueError("linear_combine needs at least one model")
    if len(models) != len(coefficients):
        raise ValueError(f"{len(models)} models but {len(coefficients)} coefficients")
    ref = models[0].shapes
    for m in models[1:]:
        if m.shapes != ref:
            raise ShapeError(f"architecture mismatch: {m.shapes} vs {ref}")
    c0 = float(coefficients[0])
    ws = [c0 * w for w, _ in models[0].layers]
    bs = [c0 * b for _, b in models[0].layers]
    for m, c in zip(models[1:], coefficients[1:]):
        c = float(c)
        for k, (w, b) in enumerate(m.layers):
            ws[k] += c * w
            bs[k] += c * b
    return ModelParams(list(zip(ws, bs)))


def predict(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    logits, _ = forward(params, inputs)
    return logits.argmax(axis=1)


def accuracy(params: ModelParams, inputs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float((predict(params, inputs) == np.asarray(labels)).mean())


def train_local(
    params: ModelParams,
    inputs: np.ndarray,
    labels: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    reg: Optional[RegularizerHook] = None,
    on_batch: Optional[Callable[[ModelParams], None]] = None,
) -> ModelParams:
    """Mini-batch SGD over ``epochs`` passes; data order drawn from ``rng``."""
    n = len(labels)
    current = params.copy()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, grads = loss_and_grad(current, Batch(inputs[idx], labels[idx]), reg)
            current = sgd_step(current, grads, lr)
            if on_batch is not None:
                on_batch(current)
    return current
