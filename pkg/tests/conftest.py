import pathlib
import sys

import numpy as np
import pytest

from alma import nn
from alma.harness.data import DESK_DATASET, REFERENCE_MODEL, bundled_path, load_dataset

TESTS = pathlib.Path(__file__).parent
sys.path.insert(0, str(TESTS))


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def linear_model(rng: np.random.Generator, dim: int = 20, classes: int = 3) -> nn.Model:
    w = rng.normal(size=(classes, dim))
    b = rng.normal(size=classes) * 0.1
    return nn.Model([nn.Flatten(), nn.Dense(w, b)], (1, 1, dim))


def hyperplane_distance(model: nn.Model, x: np.ndarray) -> float:
    """Closed-form minimal L2 distance to the nearest other-class halfspace of a linear model."""
    dense = model.layers[-1]
    z = dense.weights @ x.ravel() + dense.bias
    y = int(np.argmax(z))
    return min(
        (z[y] - z[j]) / np.linalg.norm(dense.weights[y] - dense.weights[j]) for j in range(z.size) if j != y
    )


def interior_linear_samples(model: nn.Model, rng: np.random.Generator, count: int):
    """Samples whose nearest adversarial projection stays strictly inside the box."""
    dense = model.layers[-1]
    dim = dense.weights.shape[1]
    out = []
    while len(out) < count:
        x = rng.uniform(0.3, 0.7, size=(1, 1, dim))
        z = dense.weights @ x.ravel() + dense.bias
        y = int(np.argmax(z))
        others = [j for j in range(z.size) if j != y]
        dists = [(z[y] - z[j]) / np.linalg.norm(dense.weights[y] - dense.weights[j]) for j in others]
        j = others[int(np.argmin(dists))]
        step = dense.weights[y] - dense.weights[j]
        proj = x.ravel() - min(dists) * step / np.linalg.norm(step)
        if proj.min() > 0 and proj.max() < 1:
            out.append((x, y, min(dists)))
    return out


@pytest.fixture(scope="session")
def reference_model() -> nn.Model:
    return nn.load_model(bundled_path(REFERENCE_MODEL))


@pytest.fixture(scope="session")
def desk():
    return load_dataset(bundled_path(DESK_DATASET))
