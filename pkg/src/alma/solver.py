"""ALMA: augmented Lagrangian minimal-perturbation attack.

Inner and outer iterations are fused: every iteration takes one gradient step
on ``D(x_tilde, x) + P(d, rho, mu)`` (``d`` being the DLR+ / tDLR+ constraint)
and refreshes the multiplier ``mu`` from the penalty derivative, smoothed with
an exponential moving average and clamped to ``[mu_min, mu_max]``. ``rho``
grows by ``gamma`` every ``check_period`` iterations while nothing adversarial
has been found and the constraint stalls.

The step size is calibrated per sample so the first plain gradient step on the
constraint moves the distance by ``epsilon``; it stays constant until the
first adversarial iterate, then decays exponentially to
``final_lr_fraction`` of its initial value at the last iteration. Steps use
RMSProp with momentum, the squared-gradient average starting at 1.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np

from alma import nn
from alma.constraints import DegenerateLogitsError, constraint
from alma.distances import DistanceKind, DistanceSpec, distance, distance_value_grad
from alma.penalties import Penalty, penalty_derivative, penalty_value

DEFAULT_EPSILON = {
    DistanceKind.L1: 0.5,
    DistanceKind.L2: 0.1,
    DistanceKind.SSIM: 3e-5,
    DistanceKind.CIEDE2000: 0.05,
}


class ZeroGradientError(ArithmeticError):
    """The constraint gradient vanishes, so no step size can be calibrated."""


def default_alpha(iterations: int) -> float:
    """EMA coefficient for a budget: 0.5 at <= 100 steps, 0.9 at >= 1000, linear between."""
    if iterations <= 100:
        return 0.5
    if iterations >= 1000:
        return 0.9
    return 0.5 + 0.4 * (iterations - 100) / 900


@dataclasses.dataclass
class AlmaConfig:
    iterations: int = 1000
    distance: DistanceSpec = dataclasses.field(default_factory=DistanceSpec)
    epsilon: Optional[float] = None  # None: per-distance default
    alpha: Optional[float] = None  # None: chosen from the iteration budget
    gamma: float = 1.2
    tau: float = 0.95
    check_period: int = 10
    mu_init: float = 1.0
    rho_init: float = 1.0
    mu_min: float = 1e-6
    mu_max: float = 1e12
    penalty: Penalty = Penalty.P2
    targeted: bool = False
    momentum: float = 0.9
    sq_decay: float = 0.99
    opt_eps: float = 1e-8
    final_lr_fraction: float = 0.01
    record_trace: bool = True

    def __post_init__(self):
        self.distance = DistanceSpec.parse(self.distance)
        self.penalty = Penalty.parse(self.penalty)
        if self.epsilon is None:
            self.epsilon = DEFAULT_EPSILON[self.distance.kind]
        if self.alpha is None:
            self.alpha = default_alpha(self.iterations)
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        if self.gamma <= 1:
            raise ValueError("gamma must exceed 1")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        if self.check_period < 1:
            raise ValueError("check_period must be positive")
        if not 0 < self.mu_min <= self.mu_init <= self.mu_max:
            raise ValueError("need 0 < mu_min <= mu_init <= mu_max")
        if self.rho_init <= 0 or self.epsilon <= 0 or self.final_lr_fraction <= 0:
            raise ValueError("rho_init, epsilon and final_lr_fraction must be positive")


@dataclasses.dataclass
class AlmaTrace:
    constraint: list = dataclasses.field(default_factory=list)
    mu: list = dataclasses.field(default_factory=list)
    rho: list = dataclasses.field(default_factory=list)
    lr: list = dataclasses.field(default_factory=list)
    distance: list = dataclasses.field(default_factory=list)
    init_lr: float = float("nan")
    init_saturated: bool = False
    init_counters: nn.PropagationCounter = dataclasses.field(default_factory=nn.PropagationCounter)


@dataclasses.dataclass
class AttackResult:
    success: bool
    adversarial: Optional[np.ndarray]
    distance: Optional[float]
    counters: nn.PropagationCounter
    init_counters: nn.PropagationCounter = dataclasses.field(default_factory=nn.PropagationCounter)
    trace: Optional[AlmaTrace] = None
    found_iteration: Optional[int] = None


# --------------------------------------------------------------------------
# step size


def init_step_size(
    model: nn.Model,
    x: np.ndarray,
    label: int,
    distance_spec: "DistanceSpec | str",
    epsilon: float,
    counter: nn.PropagationCounter | None = None,
    targeted: bool = False,
    rel_tol: float = 1e-4,
    max_lr: float = 1e12,
) -> tuple[float, bool]:
    """Find lr such that ``D(clip(x - lr * g), x) == epsilon``, g = grad of the constraint at x.

    Returns ``(lr, saturated)``. One forward and one backward propagation are
    spent on ``g``; the search itself only evaluates the distance. When the
    box projection caps the distance below ``epsilon`` the smallest lr that
    reaches the capped distance is returned with ``saturated=True``.
    """
    spec = DistanceSpec.parse(distance_spec)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    def loss(z):
        try:
            c = constraint(z, label, targeted)
        except DegenerateLogitsError:
            return 0.0, np.zeros_like(z)
        return c.value, c.grad_logits

    _, _, g = nn.value_and_grad(model, x, loss, counter)
    if not np.any(g):
        raise ZeroGradientError("constraint gradient is zero at the clean input")

    def dist(lr: float) -> float:
        return distance(spec, np.clip(x - lr * g, 0.0, 1.0), x)

    def bracket(target: float, hi: float) -> tuple[float, float]:
        # step down by factors of 10 from a point reaching the target
        while True:
            lo = hi / 10.0
            if lo < 1e-300 or dist(lo) < target:
                return lo, hi
            hi = lo

    saturated = False
    target = epsilon
    if dist(1.0) >= epsilon:
        lo, hi = bracket(epsilon, 1.0)
    else:
        lo = 1.0
        while True:
            hi = min(lo * 10.0, max_lr)
            if dist(hi) >= epsilon:
                break
            if hi >= max_lr:
                saturated = True
                break
            lo = hi
        if saturated:
            d_max = dist(max_lr)
            if d_max <= 0:
                raise ZeroGradientError("projection leaves no room to move along the gradient")
            target = d_max * (1.0 - 1e-3)
            lo, hi = bracket(target, max_lr)

    d_hi = dist(hi)
    for _ in range(30):
        if abs(d_hi - target) <= rel_tol * target:
            break
        mid = 0.5 * (lo + hi)
        d_mid = dist(mid)
        if d_mid < target:
            lo = mid
        else:
            hi, d_hi = mid, d_mid
    return hi, saturated


def lr_at(i: int, config: AlmaConfig, found_iteration: Optional[int], init_lr: float = 1.0) -> float:
    """Step size at iteration ``i``: flat until the first adversarial, then exponential decay."""
    n = config.iterations
    if found_iteration is None or i <= found_iteration or found_iteration >= n - 1:
        return init_lr
    frac = (i - found_iteration) / (n - 1 - found_iteration)
    return init_lr * config.final_lr_fraction ** frac


# --------------------------------------------------------------------------
# optimizer


class RMSPropMomentum:
    """RMSProp with heavy-ball momentum; the squared-gradient EMA starts at 1."""

    def __init__(self, shape, momentum: float = 0.9, sq_decay: float = 0.99, eps: float = 1e-8):
        self.momentum = momentum
        self.sq_decay = sq_decay
        self.eps = eps
        self.square_avg = np.ones(shape)
        self.buf = np.zeros(shape)

    @classmethod
    def from_config(cls, shape, config: AlmaConfig) -> "RMSPropMomentum":
        return cls(shape, config.momentum, config.sq_decay, config.opt_eps)

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        """Update the accumulators and return the (unsigned) step ``lr * buf``."""
        b2 = self.sq_decay
        self.square_avg *= b2
        self.square_avg += (1.0 - b2) * grad * grad
        self.buf *= self.momentum
        self.buf += grad / np.sqrt(self.square_avg + self.eps)
        return lr * self.buf


def optimizer_step(state: RMSPropMomentum, grad: np.ndarray, lr: float) -> np.ndarray:
    return state.step(np.asarray(grad, dtype=np.float64), lr)


# --------------------------------------------------------------------------
# attack


def alma_attack(model: nn.Model, x: np.ndarray, label: int, config: AlmaConfig | None = None) -> AttackResult:
    """Run ALMA for exactly ``config.iterations`` fused forward/backward passes.

    ``label`` is the true class, or the target class when ``config.targeted``.
    """
    config = config or AlmaConfig()
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise nn.ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("input must lie in [0, 1]")
    if config.targeted and model.num_classes < 4:
        raise ValueError("targeted attacks need at least 4 classes")

    spec = config.distance
    kind = config.penalty
    n = config.iterations
    trace = AlmaTrace() if config.record_trace else None

    init_counter = nn.PropagationCounter()
    try:
        lr0, saturated = init_step_size(
            model, x, label, spec, config.epsilon, init_counter, config.targeted
        )
    except ZeroGradientError:
        lr0, saturated = 1.0, False
    if trace is not None:
        trace.init_lr, trace.init_saturated, trace.init_counters = lr0, saturated, init_counter

    counter = nn.PropagationCounter()
    opt = RMSPropMomentum.from_config(x.shape, config)
    x_adv = x.copy()
    mu, rho = config.mu_init, config.rho_init
    history: list[float] = []
    all_positive = True
    found: Optional[int] = None
    best_x: Optional[np.ndarray] = None
    best_d = math.inf

    for i in range(n):
        step = {}

        def loss(z):
            try:
                c = constraint(z, label, config.targeted)
                d, dz = c.value, c.grad_logits
            except DegenerateLogitsError:
                d, dz = 1.0, np.zeros_like(z)
            mu_hat = penalty_derivative(kind, d, rho, mu)
            new_mu = min(max(config.alpha * mu + (1.0 - config.alpha) * mu_hat, config.mu_min), config.mu_max)
            step["d"], step["mu"] = d, new_mu
            return penalty_value(kind, d, rho, new_mu), penalty_derivative(kind, d, rho, new_mu) * dz

        _, _, penalty_grad = nn.value_and_grad(model, x_adv, loss, counter)
        d, mu = step["d"], step["mu"]
        dist_val, dist_grad = distance_value_grad(spec, x_adv, x)
        history.append(d)

        if d < 0:
            if found is None:
                found = i
            if dist_val < best_d:
                best_d, best_x = dist_val, x_adv.copy()
        if d <= 0:
            all_positive = False

        lr = lr_at(i, config, found, lr0)
        if trace is not None:
            trace.constraint.append(d)
            trace.mu.append(mu)
            trace.rho.append(rho)
            trace.lr.append(lr)
            trace.distance.append(dist_val)

        update = opt.step(dist_grad + penalty_grad, lr)
        x_adv = np.clip(x_adv - update, 0.0, 1.0)

        m = config.check_period
        if (i + 1) % m == 0 and i >= m and all_positive and d > config.tau * history[i - m]:
            rho *= config.gamma

    return AttackResult(
        success=best_x is not None,
        adversarial=best_x,
        distance=best_d if best_x is not None else None,
        counters=counter,
        init_counters=init_counter,
        trace=trace,
        found_iteration=found,
    )
