"""Tiny deterministic trainer for the bundled reference classifier."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from alma import nn
from alma.harness.data import Dataset


class TrainingFailedError(RuntimeError):
    pass


def accuracy(model: nn.Model, ds: Dataset) -> float:
    return float(np.mean(model.predict(ds.images) == ds.labels))


def _softmax_xent_grad(z: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = z.shape[0]
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
    p[np.arange(n), labels] -= 1.0
    return float(loss), p / n


def train_reference_model(
    ds: Dataset,
    epochs: int = 60,
    seed: int = 0,
    hidden: Sequence[int] = (64, 32),
    lr: float = 0.05,
    momentum: float = 0.9,
    batch_size: int = 32,
    min_accuracy: float = 0.8,
) -> nn.Model:
    """Train an MLP with minibatch SGD + momentum on softmax cross-entropy.

    Deterministic given ``seed``. Raises :class:`TrainingFailedError` when
    the final training accuracy is below ``min_accuracy``.
    """
    rng = np.random.default_rng(seed)
    model = nn.mlp(rng, ds.shape, hidden, ds.num_classes)
    params = [(layer, name) for layer in model.layers for name in layer.params]
    velocity = [np.zeros_like(getattr(l, p)) for l, p in params]
    n = len(ds)

    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            z, caches = model.forward_with_cache(ds.images[idx])
            _, gz = _softmax_xent_grad(z, ds.labels[idx])
            grads: list = []
            model.backward_from_cache(gz, caches, grads)
            # backward visits layers in reverse; flatten to (weights, bias) in forward order
            flat = [g for pair in reversed(grads) for g in pair]
            for k, ((layer, name), g) in enumerate(zip(params, flat)):
                velocity[k] = momentum * velocity[k] - lr * g
                setattr(layer, name, getattr(layer, name) + velocity[k])

    acc = accuracy(model, ds)
    if acc < min_accuracy:
        raise TrainingFailedError(f"training accuracy {acc:.3f} below {min_accuracy:.2f}")
    return model
