"""Misclassification constraints on logits: DLR+ (untargeted) and tDLR+ (targeted).

Both are negative exactly when the attack goal is met. Gradients are taken
with the logit ordering held fixed; ties in argmax and in the descending sort
resolve to the lowest index.
"""

from __future__ import annotations

import dataclasses

import numpy as np


class DegenerateLogitsError(ArithmeticError):
    """The ratio's denominator vanishes (tied top logits)."""


@dataclasses.dataclass(frozen=True)
class ConstraintEval:
    value: float
    grad_logits: np.ndarray


def _order(z: np.ndarray) -> np.ndarray:
    # stable sort on -z: descending, lowest index first among equals
    return np.argsort(-z, kind="stable")


def _best_other(pi: np.ndarray, label: int) -> int:
    # with the stable descending order this is the lowest-index argmax over i != label
    return int(pi[1]) if pi[0] == label else int(pi[0])


def _validate(z, label: int, min_k: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"logits must be a vector, got shape {z.shape}")
    if z.size < min_k:
        raise ValueError(f"need at least {min_k} logits, got {z.size}")
    if not 0 <= label < z.size:
        raise ValueError(f"label {label} out of range for {z.size} classes")
    if not np.isfinite(z).all():
        raise ValueError("logits must be finite")
    return z


def dlr_plus(z, y: int) -> ConstraintEval:
    """(z_y - max_{i!=y} z_i) / (z_pi1 - z_pi3), pi sorting z in decreasing order."""
    z = _validate(z, y, 3)
    pi = _order(z)
    j = _best_other(pi, y)
    num = z[y] - z[j]
    den = z[pi[0]] - z[pi[2]]
    if den == 0:
        raise DegenerateLogitsError("top-1 and top-3 logits are equal")

    value = num / den
    with np.errstate(over="ignore"):
        scale = value / den
    if not np.isfinite(scale):
        raise DegenerateLogitsError("ratio denominator too small for a finite gradient")

    # the top logit sits in both num and den; its coefficient is formed from
    # one logit difference so near-ties do not cancel
    grad = np.zeros_like(z)
    if y == pi[0]:
        grad[y] = (z[j] - z[pi[2]]) / den / den
        grad[j] = -1.0 / den
    else:
        grad[j] = (z[pi[2]] - z[y]) / den / den
        grad[y] += 1.0 / den
    grad[pi[2]] += scale
    return ConstraintEval(float(value), grad)


def tdlr_plus(z, t: int) -> ConstraintEval:
    """(max_{i!=t} z_i - z_t) / (z_pi1 - (z_pi3 + z_pi4) / 2)."""
    z = _validate(z, t, 4)
    pi = _order(z)
    j = _best_other(pi, t)
    num = z[j] - z[t]
    mid = 0.5 * (z[pi[2]] + z[pi[3]])
    den = z[pi[0]] - mid
    if den == 0:
        raise DegenerateLogitsError("top-1 logit equals the mean of top-3 and top-4")

    value = num / den
    with np.errstate(over="ignore"):
        scale = value / den
    if not np.isfinite(scale):
        raise DegenerateLogitsError("ratio denominator too small for a finite gradient")

    grad = np.zeros_like(z)
    if t == pi[0]:
        grad[t] = (mid - z[j]) / den / den
        grad[j] = 1.0 / den
    else:
        grad[j] = (z[t] - mid) / den / den
        grad[t] -= 1.0 / den
    grad[pi[2]] += 0.5 * scale
    grad[pi[3]] += 0.5 * scale
    return ConstraintEval(float(value), grad)


def constraint(z, label: int, targeted: bool = False) -> ConstraintEval:
    return tdlr_plus(z, label) if targeted else dlr_plus(z, label)


def is_adversarial(z, label: int, targeted: bool = False) -> bool:
    """Goal check without the ratio: strict misclassification, or strict target win."""
    z = np.asarray(z, dtype=np.float64)
    other = np.max(np.delete(z, label))
    if targeted:
        return bool(z[label] > other)
    return bool(z[label] < other)
