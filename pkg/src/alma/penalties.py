"""Penalty-Lagrangian functions P(y, rho, mu) and their closed-form derivatives.

Four functions are provided: PHR, P1, P2 and P3. ``y`` is the value of the
inequality constraint (satisfied when negative), ``rho`` the penalty parameter
and ``mu`` the penalty multiplier. Every derivative equals ``mu`` at ``y = 0``
and is nonnegative everywhere.

Derivatives are written out by hand so they can serve as an oracle for the
autodiff code paths.
"""

from __future__ import annotations

import enum
import math


class Penalty(str, enum.Enum):
    PHR = "phr"
    P1 = "p1"
    P2 = "p2"
    P3 = "p3"

    @classmethod
    def parse(cls, name: "str | Penalty") -> "Penalty":
        if isinstance(name, Penalty):
            return name
        try:
            return cls(name.lower())
        except ValueError:
            choices = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown penalty {name!r} (expected one of {choices})") from None

    def evaluate(self, y: float, rho: float, mu: float) -> float:
        return penalty_value(self, y, rho, mu)

    def derivative(self, y: float, rho: float, mu: float) -> float:
        return penalty_derivative(self, y, rho, mu)


def _check(y: float, rho: float, mu: float) -> None:
    if not math.isfinite(y):
        raise ValueError(f"constraint value must be finite, got {y}")
    if not (math.isfinite(rho) and rho > 0):
        raise ValueError(f"rho must be finite and positive, got {rho}")
    if not (math.isfinite(mu) and mu > 0):
        raise ValueError(f"mu must be finite and positive, got {mu}")


def penalty_value(kind: "Penalty | str", y: float, rho: float, mu: float) -> float:
    """Evaluate P(y, rho, mu) for the selected penalty.

    At a piece boundary the ``y >= 0`` branch is used.
    """
    kind = Penalty.parse(kind)
    y, rho, mu = float(y), float(rho), float(mu)
    _check(y, rho, mu)

    if kind is Penalty.PHR:
        t = max(0.0, mu + rho * y)
        return (t * t - mu * mu) / (2.0 * rho)
    if kind is Penalty.P1:
        if y >= 0:
            return mu * y + 0.5 * rho * y * y + rho * rho * y ** 3
        if y >= -mu / rho:
            return mu * y + 0.5 * rho * y * y
        return -0.5 * mu * mu / rho
    if kind is Penalty.P2:
        if y >= 0:
            return mu * y + mu * rho * y * y + rho * rho * y ** 3 / 6.0
        return mu * y / (1.0 - rho * y)
    # P3
    if y >= 0:
        return mu * y + mu * rho * y * y
    return mu * y / (1.0 - rho * y)


def penalty_derivative(kind: "Penalty | str", y: float, rho: float, mu: float) -> float:
    """Closed-form dP/dy. Always >= 0 and exactly ``mu`` at ``y = 0``."""
    kind = Penalty.parse(kind)
    y, rho, mu = float(y), float(rho), float(mu)
    _check(y, rho, mu)

    if kind is Penalty.PHR:
        return max(0.0, mu + rho * y)
    if kind is Penalty.P1:
        if y >= 0:
            return mu + rho * y + 3.0 * rho * rho * y * y
        if y >= -mu / rho:
            # rounding at y = -mu/rho can dip below zero
            return max(0.0, mu + rho * y)
        return 0.0
    if kind is Penalty.P2:
        if y >= 0:
            return mu + 2.0 * mu * rho * y + 0.5 * rho * rho * y * y
        return mu / (1.0 - rho * y) ** 2
    if y >= 0:
        return mu + 2.0 * mu * rho * y
    return mu / (1.0 - rho * y) ** 2
