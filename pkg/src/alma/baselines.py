"""Reference optimizers used to validate and put ALMA in context.

* :func:`generic_alm`: the textbook augmented Lagrangian loop on smooth
  problems with a single inequality constraint ``h(x) <= 0``.
* :func:`penalty_attack`: a fixed-weight penalty attack with an outer search
  over the weight ``c`` (the usual "multiply by 10, then bisect" schedule).
* :func:`minimal_via_binary_search`: turns any budget attack into a
  minimal-perturbation attack by bisecting on the budget.
* :func:`pgd_l2`: a small projected-gradient budget attack to feed the wrapper.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional, TypeVar

import numpy as np

from alma import nn
from alma.constraints import DegenerateLogitsError, constraint, is_adversarial
from alma.distances import DistanceSpec, distance_value_grad
from alma.penalties import Penalty, penalty_derivative, penalty_value
from alma.solver import (
    DEFAULT_EPSILON,
    AttackResult,
    RMSPropMomentum,
    ZeroGradientError,
    init_step_size,
)

Vector = np.ndarray


class DivergenceError(ArithmeticError):
    """The objective blew up; ``trace`` holds the outer iterations so far."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclasses.dataclass
class SmoothProblem:
    """``min g(x)  s.t.  h(x) <= 0`` with analytic gradients."""

    objective: Callable[[Vector], float]
    objective_grad: Callable[[Vector], Vector]
    constraint: Callable[[Vector], float]
    constraint_grad: Callable[[Vector], Vector]
    dim: int
    x0: Optional[Vector] = None
    solution: Optional[Vector] = None
    multiplier: Optional[float] = None

    def start(self) -> Vector:
        if self.x0 is None:
            return np.zeros(self.dim)
        return np.array(self.x0, dtype=np.float64)


@dataclasses.dataclass
class AlmStep:
    x: Vector
    objective: float
    constraint: float
    mu: float
    rho: float
    inner_iterations: int


def _minimize(f, grad, x, max_iters: int, tol: float) -> tuple[Vector, int]:
    """Gradient descent with an Armijo backtracking (halving) line search.

    The step is never grown again once halved: regrowing lets rounding noise
    in ``f`` accept oversized steps near the optimum.
    """
    step = 1.0
    fx = f(x)
    for it in range(max_iters):
        g = grad(x)
        gg = float(g @ g)
        if math.sqrt(gg) <= tol:
            return x, it
        while True:
            cand = x - step * g
            fc = f(cand)
            if fc <= fx - 1e-4 * step * gg:
                break
            step *= 0.5
            if step < 1e-20:
                return x, it
        x, fx = cand, fc
        if not math.isfinite(fx) or abs(fx) > 1e100:
            raise ArithmeticError("objective diverged")
    return x, max_iters


def generic_alm(
    problem: SmoothProblem,
    penalty: "Penalty | str" = Penalty.PHR,
    outer_iters: int = 50,
    inner_iters: int = 2000,
    inner_tolerance: float = 1e-9,
    rho_factor: float = 2.0,
    tau_outer: float = 0.5,
    mu_init: float = 1.0,
    rho_init: float = 1.0,
    mu_min: float = 1e-6,
    mu_max: float = 1e12,
    rho_max: float = 1e6,
    outer_tolerance: float = 1e-10,
) -> tuple[Vector, list[AlmStep]]:
    """Augmented Lagrangian loop: minimize ``g + P(h, rho, mu)``, then ``mu <- P'(h, rho, mu)``.

    ``rho`` grows by ``rho_factor`` whenever ``h(x_new) > tau_outer * h(x_old)``
    and is capped at ``rho_max`` to keep the inner problems conditioned.
    Stops early once both ``x`` and ``mu`` move by less than ``outer_tolerance``.
    """
    kind = Penalty.parse(penalty)
    if not 2 <= rho_factor <= 100:
        raise ValueError("rho_factor must lie in [2, 100]")
    x = problem.start()
    mu, rho = mu_init, rho_init
    h_old = problem.constraint(x)
    trace: list[AlmStep] = []

    for _ in range(outer_iters):

        def f(v, mu=mu, rho=rho):
            return problem.objective(v) + penalty_value(kind, problem.constraint(v), rho, mu)

        def grad(v, mu=mu, rho=rho):
            dp = penalty_derivative(kind, problem.constraint(v), rho, mu)
            return problem.objective_grad(v) + dp * problem.constraint_grad(v)

        try:
            x, used = _minimize(f, grad, x, inner_iters, inner_tolerance)
        except ArithmeticError as exc:
            raise DivergenceError(str(exc), trace) from None
        h = problem.constraint(x)
        mu_prev = mu
        mu = min(max(penalty_derivative(kind, h, rho, mu), mu_min), mu_max)
        moved = float(np.max(np.abs(x - trace[-1].x))) if trace else math.inf
        trace.append(AlmStep(x.copy(), problem.objective(x), h, mu, rho, used))
        if moved < outer_tolerance and abs(mu - mu_prev) < outer_tolerance * max(1.0, mu):
            break
        if h > tau_outer * h_old:
            rho = min(rho * rho_factor, rho_max)
        h_old = h
    return x, trace


# --------------------------------------------------------------------------
# analytic problems


def halfspace_problem(dim: int = 3) -> SmoothProblem:
    """``min ||x||^2  s.t.  1 - x_0 <= 0``; optimum ``e_0`` with multiplier 2."""
    e0 = np.zeros(dim)
    e0[0] = 1.0
    return SmoothProblem(
        objective=lambda x: float(x @ x),
        objective_grad=lambda x: 2.0 * x,
        constraint=lambda x: 1.0 - float(x[0]),
        constraint_grad=lambda x: -e0,
        dim=dim,
        solution=e0,
        multiplier=2.0,
    )


def boundary_problem() -> SmoothProblem:
    """``min (x - 2)^2  s.t.  x - 1 <= 0``; optimum 1 with multiplier 2."""
    return SmoothProblem(
        objective=lambda x: float((x[0] - 2.0) ** 2),
        objective_grad=lambda x: np.array([2.0 * (x[0] - 2.0)]),
        constraint=lambda x: float(x[0] - 1.0),
        constraint_grad=lambda x: np.ones(1),
        dim=1,
        solution=np.ones(1),
        multiplier=2.0,
    )


def inactive_problem() -> SmoothProblem:
    """``min (x - 0.5)^2  s.t.  x - 1 <= 0``; the constraint is inactive."""
    return SmoothProblem(
        objective=lambda x: float((x[0] - 0.5) ** 2),
        objective_grad=lambda x: np.array([2.0 * (x[0] - 0.5)]),
        constraint=lambda x: float(x[0] - 1.0),
        constraint_grad=lambda x: np.ones(1),
        dim=1,
        solution=np.array([0.5]),
        multiplier=0.0,
    )


# --------------------------------------------------------------------------
# penalty-method attack


def _constraint_loss(label: int, targeted: bool, weight: Callable[[float], float]):
    """Logit loss ``weight(d) * max(d, 0)``, gradient ``weight(d) * grad d``; degenerate logits give d = 1."""
    seen = {}

    def loss(z):
        try:
            c = constraint(z, label, targeted)
            d, dz = c.value, c.grad_logits
        except DegenerateLogitsError:
            d, dz = 1.0, np.zeros_like(z)
        seen["d"] = d
        w = weight(d)
        return w * max(d, 0.0), w * dz

    return loss, seen


def penalty_attack(
    model: nn.Model,
    x: np.ndarray,
    label: int,
    distance_spec: "DistanceSpec | str" = "l2",
    n_search_steps: int = 9,
    inner_iters: int = 1000,
    c_init: float = 1.0,
    targeted: bool = False,
    epsilon: Optional[float] = None,
    final_lr_fraction: float = 0.01,
    momentum: float = 0.9,
    sq_decay: float = 0.99,
) -> AttackResult:
    """Minimize ``D(x_tilde, x) + c * max(d, 0)`` for a sequence of weights ``c``.

    Each round restarts from ``x`` with fresh optimizer state and runs exactly
    ``inner_iters`` steps, the step size decaying exponentially from the
    calibrated initial value to ``final_lr_fraction`` of it. After a round,
    ``c`` is multiplied by 10 if nothing adversarial was found and no
    successful weight is known yet; otherwise it is bisected between the
    largest failing and the smallest succeeding weight.
    """
    spec = DistanceSpec.parse(distance_spec)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise nn.ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("input must lie in [0, 1]")
    if n_search_steps < 1 or inner_iters < 1 or c_init <= 0:
        raise ValueError("n_search_steps, inner_iters and c_init must be positive")
    eps = DEFAULT_EPSILON[spec.kind] if epsilon is None else epsilon

    init_counter = nn.PropagationCounter()
    try:
        lr0, _ = init_step_size(model, x, label, spec, eps, init_counter, targeted)
    except ZeroGradientError:
        lr0 = 1.0

    counter = nn.PropagationCounter()
    c, lower, upper = c_init, 0.0, math.inf
    best_x: Optional[np.ndarray] = None
    best_d = math.inf
    found_at: Optional[int] = None
    decay = final_lr_fraction ** (1.0 / max(inner_iters - 1, 1))

    for round_no in range(n_search_steps):
        opt = RMSPropMomentum(x.shape, momentum, sq_decay)
        x_adv = x.copy()
        succeeded = False
        loss, seen = _constraint_loss(label, targeted, lambda d, c=c: c if d > 0 else 0.0)
        lr = lr0
        for i in range(inner_iters):
            _, _, g_pen = nn.value_and_grad(model, x_adv, loss, counter)
            dist_val, g_dist = distance_value_grad(spec, x_adv, x)
            if seen["d"] < 0:
                succeeded = True
                if dist_val < best_d:
                    best_d, best_x = dist_val, x_adv.copy()
                    if found_at is None:
                        found_at = round_no * inner_iters + i
            x_adv = np.clip(x_adv - opt.step(g_dist + g_pen, lr), 0.0, 1.0)
            lr *= decay
        if succeeded:
            upper = min(upper, c)
        else:
            lower = max(lower, c)
        c = c * 10.0 if math.isinf(upper) else 0.5 * (lower + upper)

    # re-check the winner from scratch; this pass is bookkeeping, not counted
    if best_x is not None and not is_adversarial(model.logits(best_x[None])[0], label, targeted):
        best_x, best_d = None, math.inf
    return AttackResult(
        success=best_x is not None,
        adversarial=best_x,
        distance=best_d if best_x is not None else None,
        counters=counter,
        init_counters=init_counter,
        found_iteration=found_at,
    )


# --------------------------------------------------------------------------
# budget attacks and the bisection wrapper

T = TypeVar("T")


def minimal_via_binary_search(
    budget_attack: Callable[[float], Optional[T]],
    lo: float,
    hi: float,
    precision: float,
    verify: Optional[Callable[[T], bool]] = None,
) -> Optional[tuple[T, float]]:
    """Smallest budget (up to ``precision``) at which ``budget_attack`` succeeds.

    Returns ``(adversarial, budget)`` for the final upper end of the bracket,
    or None when the attack fails at ``hi``. ``verify`` re-checks every
    candidate; a candidate that fails it counts as a failure.
    """
    if not lo < hi or precision <= 0:
        raise ValueError("need lo < hi and precision > 0")

    def attempt(budget: float) -> Optional[T]:
        adv = budget_attack(budget)
        if adv is not None and verify is not None and not verify(adv):
            return None
        return adv

    best = attempt(hi)
    if best is None:
        return None
    while hi - lo >= precision:
        mid = 0.5 * (lo + hi)
        adv = attempt(mid)
        if adv is None:
            lo = mid
        else:
            hi, best = mid, adv
    return best, hi


def pgd_l2(
    model: nn.Model,
    x: np.ndarray,
    label: int,
    budget: float,
    steps: int = 100,
    step_fraction: float = 2.5,
    targeted: bool = False,
    counter: nn.PropagationCounter | None = None,
) -> Optional[np.ndarray]:
    """Projected gradient descent on the constraint inside an L2 ball of radius ``budget``.

    Each step moves ``step_fraction * budget / steps`` along the normalised
    gradient, then projects onto the ball and the box. Returns the first
    adversarial iterate, or None.
    """
    x = np.asarray(x, dtype=np.float64)
    alpha = step_fraction * budget / steps
    loss, seen = _constraint_loss(label, targeted, lambda d: 1.0)
    x_adv = x.copy()
    for _ in range(steps):
        _, _, g = nn.value_and_grad(model, x_adv, loss, counter)
        if seen["d"] < 0:
            return x_adv
        norm = float(np.linalg.norm(g))
        if norm == 0.0:
            return None
        x_adv = x_adv - alpha * g / norm
        delta = x_adv - x
        dn = float(np.linalg.norm(delta))
        if dn > budget:
            delta *= budget / dn
        x_adv = np.clip(x + delta, 0.0, 1.0)
    z = nn.forward(model, x_adv, counter)
    return x_adv if is_adversarial(z, label, targeted) else None

