"""A small multilayer perceptron trained with plain mini-batch SGD.

Weights live in one flat vector. For each layer ``i`` (input ``d_i``, output
``d_{i+1}``) the vector holds the weight matrix in row-major ``(d_i, d_{i+1})``
order followed by the bias of length ``d_{i+1}``; layers follow each other in
order. Hidden layers use ReLU, the output layer softmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedsim import params
from fedsim.data import Dataset


class ModelError(ValueError):
    pass


def num_weights(layer_dims: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_dims[:-1], layer_dims[1:]))


@dataclass(frozen=True)
class MlpModel:
    layer_dims: tuple[int, ...]
    weights: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ModelError(f"layer_dims must hold at least two positive sizes, got {dims}")
        w = params.as_vector(self.weights)
        if w.shape[0] != num_weights(dims):
            raise ModelError(f"expected {num_weights(dims)} weights for {dims}, got {w.shape[0]}")
        w.flags.writeable = False
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", w)

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into the flat weight vector."""
        return _unflatten(self.layer_dims, self.weights)

    def with_weights(self, weights: np.ndarray) -> "MlpModel":
        return MlpModel(self.layer_dims, weights)


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.01
    batch_size: int = 10
    local_epochs: int = 5
    shuffle_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ModelError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ModelError("batch_size and local_epochs must be positive")


def init_model(layer_dims: Sequence[int], seed: int) -> MlpModel:
    """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for weights and biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for a, b in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(a)
        chunks.append(rng.uniform(-bound, bound, size=a * b))
        chunks.append(rng.uniform(-bound, bound, size=b))
    return MlpModel(tuple(layer_dims), np.concatenate(chunks))


def zero_model(layer_dims: Sequence[int]) -> MlpModel:
    return MlpModel(tuple(layer_dims), np.zeros(num_weights(layer_dims)))


def _unflatten(dims, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    pos = 0
    for a, b in zip(dims[:-1], dims[1:]):
        W = w[pos: pos + a * b].reshape(a, b)
        pos += a * b
        out.append((W, w[pos: pos + b]))
        pos += b
    return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _forward_all(dims, w: np.ndarray, X: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Return the per-layer inputs and the output log-probabilities."""
    layers = _unflatten(dims, w)
    acts = [X]
    h = X
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        if i < len(layers) - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            return acts, _log_softmax(z)
    raise AssertionError("unreachable")


def _as_matrix(model: MlpModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.layer_dims[0]:
        raise ModelError(f"expected {model.layer_dims[0]} features, got {X.shape[1]}")
    return X


def predict_proba(model: MlpModel, X) -> np.ndarray:
    """Class probabilities for each row of ``X``."""
    _, logp = _forward_all(model.layer_dims, model.weights, _as_matrix(model, X))
    return np.exp(logp)


def forward(model: MlpModel, features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise ModelError("forward takes a single feature vector")
    return predict_proba(model, features)[0]


def predict(model: MlpModel, X) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties.
    _, logp = _forward_all(model.layer_dims, model.weights, _as_matrix(model, X))
    return np.argmax(logp, axis=1)


def _loss_grad(dims, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    layers = _unflatten(dims, w)
    acts, logp = _forward_all(dims, w, X)
    n = X.shape[0]
    loss = -float(logp[np.arange(n), y].mean())

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads: list[np.ndarray] = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        grads.append(delta.sum(axis=0))
        grads.append((acts[i].T @ delta).reshape(-1))
        if i > 0:
            delta = (delta @ W.T) * (acts[i] > 0)
    grads.reverse()
    return loss, np.concatenate(grads)


def loss_and_gradient(model: MlpModel, batch: Dataset) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over ``batch`` and its gradient in flat layout."""
    if len(batch) == 0:
        raise ModelError("loss_and_gradient needs a non-empty batch")
    return _loss_grad(model.layer_dims, model.weights, _as_matrix(model, batch.features), batch.labels)


def local_train(model: MlpModel, shard, cfg: TrainingConfig) -> MlpModel:
    """Run ``cfg.local_epochs`` epochs of mini-batch SGD and return the new model.

    ``shard`` may be a :class:`Dataset` or anything with a ``data`` attribute
    holding one. Every epoch reshuffles the examples with a generator seeded
    from ``cfg.shuffle_seed``; the last batch of an epoch may be smaller.
    """
    data: Dataset = getattr(shard, "data", shard)
    if len(data) == 0:
        raise ModelError("cannot train on an empty shard")
    X = _as_matrix(model, data.features)
    y = data.labels
    rng = np.random.default_rng(cfg.shuffle_seed)
    dims = model.layer_dims
    w = model.weights.copy()
    n = X.shape[0]
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            _, g = _loss_grad(dims, w, X[idx], y[idx])
            w -= cfg.learning_rate * g
    return MlpModel(dims, w)


def compute_update(new: MlpModel, old: MlpModel) -> np.ndarray:
    if new.layer_dims != old.layer_dims:
        raise ModelError(f"layer mismatch: {new.layer_dims} vs {old.layer_dims}")
    return params.subtract(new.weights, old.weights)


def evaluate(model: MlpModel, data: Dataset) -> float:
    """Fraction of examples whose top-probability class equals the label."""
    if len(data) == 0:
        raise ModelError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, data.features) == data.labels))
