"""ReLU multilayer perceptron over a flat parameter vector.

Layout: for each layer in order, the weight matrix of shape ``(fan_in,
fan_out)`` in row-major order, followed by its bias of length ``fan_out``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datasets import Dataset
from .numerics import DimensionError


@dataclass(frozen=True)
class Topology:
    widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("topology needs at least an input and an output layer")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.widths[:-1], self.widths[1:]))

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    def layout(self) -> list[tuple[slice, slice, tuple[int, int]]]:
        """``(weight_slice, bias_slice, (fan_in, fan_out))`` per layer."""
        out = []
        off = 0
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            w = slice(off, off + fan_in * fan_out)
            off = w.stop
            b = slice(off, off + fan_out)
            off = b.stop
            out.append((w, b, (fan_in, fan_out)))
        return out


def init_params(topology: Topology, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    params = np.zeros(topology.num_params)
    for w, _, (fan_in, fan_out) in topology.layout():
        bound = 1.0 / math.sqrt(fan_in)
        params[w] = rng.uniform(-bound, bound, size=fan_in * fan_out)
    return params


def _unpack(params: np.ndarray, topology: Topology):
    if params.shape != (topology.num_params,):
        raise DimensionError(f"expected {topology.num_params} parameters, got {params.shape}")
    return [(params[w].reshape(shape), params[b]) for w, b, shape in topology.layout()]


def _forward(params, topology, x):
    layers = _unpack(params, topology)
    acts = [x]
    pre = []
    h = x
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    return layers, acts, pre


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_norm[:, None]
    losses = -log_probs[np.arange(labels.size), labels]
    return losses, np.exp(log_probs)


def _check_batch(topology, features, labels):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[1] != topology.input_dim:
        raise DimensionError(f"features must be (n, {topology.input_dim})")
    if features.shape[0] == 0:
        raise ValueError("batch is empty")
    if labels.shape != (features.shape[0],):
        raise DimensionError("labels do not match the batch size")
    return features, labels


def loss_and_grad(params: np.ndarray, topology: Topology, features, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    features, labels = _check_batch(topology, features, labels)
    layers, acts, pre = _forward(params, topology, features)
    losses, probs = _softmax_xent(acts[-1], labels)
    n = labels.size

    delta = probs
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    grad = np.empty_like(params)
    spans = topology.layout()
    for i in range(len(layers) - 1, -1, -1):
        w_slice, b_slice, _ = spans[i]
        grad[w_slice] = (acts[i].T @ delta).reshape(-1)
        grad[b_slice] = delta.sum(axis=0)
        if i > 0:
            # ReLU derivative is taken as 0 at exactly 0.
            delta = (delta @ layers[i][0].T) * (pre[i - 1] > 0)
    return float(losses.mean()), grad


def per_sample_grads(params: np.ndarray, topology: Topology, features, labels) -> np.ndarray:
    """Gradient of each sample's own loss, shape ``(n, d)``."""
    features, labels = _check_batch(topology, features, labels)
    layers, acts, pre = _forward(params, topology, features)
    _, probs = _softmax_xent(acts[-1], labels)
    n = labels.size
    delta = probs
    delta[np.arange(n), labels] -= 1.0

    out = np.empty((n, params.size))
    spans = topology.layout()
    for i in range(len(layers) - 1, -1, -1):
        w_slice, b_slice, _ = spans[i]
        out[:, w_slice] = np.einsum("ni,no->nio", acts[i], delta).reshape(n, -1)
        out[:, b_slice] = delta
        if i > 0:
            delta = (delta @ layers[i][0].T) * (pre[i - 1] > 0)
    return out


def clip_gradient(grad: np.ndarray, bound: float) -> np.ndarray:
    """Clamp every coordinate into ``[-bound, bound]``; ``inf`` disables it."""
    if not bound > 0:
        raise ValueError("clip bound must be positive")
    if math.isinf(bound):
        return grad
    return np.clip(grad, -bound, bound)


def predict(params: np.ndarray, topology: Topology, features) -> np.ndarray:
    _, acts, _ = _forward(params, topology, np.asarray(features, dtype=np.float64))
    # argmax returns the first maximum, i.e. ties go to the lower class index.
    return np.argmax(acts[-1], axis=1)


def evaluate(params: np.ndarray, topology: Topology, dataset: Dataset) -> tuple[float, float]:
    """``(mean loss, accuracy)`` on the whole dataset."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    features, labels = _check_batch(topology, dataset.features, dataset.labels)
    _, acts, _ = _forward(params, topology, features)
    losses, _ = _softmax_xent(acts[-1], labels)
    acc = float(np.mean(np.argmax(acts[-1], axis=1) == labels))
    return float(losses.mean()), acc
