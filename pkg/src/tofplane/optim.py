"""Gradients, Adam and Nelder-Mead over named, scaled parameter vectors.

Optimizers work on normalized coordinates ``u = value / scale`` so one
learning rate (or one simplex size) suits parameters with different units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .errors import EvaluationError, InvalidArgumentError

ANGLE_SCALE = 45.0  # degrees
DISTANCE_SCALE = 0.5  # meters
REFLECTANCE_SCALE = 1.0


@dataclass(frozen=True)
class ParamVector:
    names: tuple[str, ...]
    values: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        names = tuple(self.names)
        values = np.asarray(self.values, dtype=float).ravel().copy()
        scales = np.asarray(self.scales, dtype=float).ravel().copy()
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"parameter names must be unique: {names}")
        if not (len(names) == values.size == scales.size):
            raise InvalidArgumentError("names, values and scales must have equal lengths")
        if np.any(scales <= 0) or not np.all(np.isfinite(scales)):
            raise InvalidArgumentError("scales must be strictly positive")
        values.flags.writeable = False
        scales.flags.writeable = False
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "scales", scales)

    @classmethod
    def from_dict(cls, values: Mapping[str, float], scales: Mapping[str, float] | None = None) -> "ParamVector":
        names = tuple(values)
        sc = [1.0 if scales is None else scales.get(n, 1.0) for n in names]
        return cls(names, [values[n] for n in names], sc)

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}

    def with_values(self, values) -> "ParamVector":
        return ParamVector(self.names, values, self.scales)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return (self.names == other.names and np.array_equal(self.values, other.values)
                and np.array_equal(self.scales, other.scales))

    __hash__ = None


@dataclass
class OptimizerReport:
    """``trajectory[i]`` is the best objective seen after iteration i."""

    iterations: int = 0
    final_loss: float = math.inf
    trajectory: list[float] = field(default_factory=list)
    converged: bool = False
    evaluations: int = 0
    raw_losses: list[float] = field(default_factory=list)
    nonfinite_steps: int = 0


Objective = Callable[[torch.Tensor], torch.Tensor]


def _evaluate(objective: Objective, x: ParamVector, need_grad: bool) -> tuple[float, np.ndarray | None]:
    v = torch.tensor(np.array(x.values), dtype=torch.float64, requires_grad=need_grad)
    out = objective(v)
    loss = float(out.detach())
    if not math.isfinite(loss):
        raise EvaluationError(f"objective is {loss} at {x.as_dict()}", params=x.as_dict())
    if not need_grad:
        return loss, None
    if out.requires_grad:
        (g,) = torch.autograd.grad(out, v, allow_unused=True)
    else:
        g = None
    grad = np.zeros(len(x)) if g is None else g.detach().numpy().copy()
    if not np.all(np.isfinite(grad)):
        raise EvaluationError(f"gradient is not finite at {x.as_dict()}", params=x.as_dict())
    return loss, grad


def gradient(objective: Objective, at: ParamVector) -> np.ndarray:
    """Exact partials of ``objective`` (a torch function of the value vector) at ``at``."""
    return _evaluate(objective, at, need_grad=True)[1]


def _bounds_arrays(x: ParamVector, bounds) -> tuple[np.ndarray, np.ndarray]:
    lo = np.full(len(x), -np.inf)
    hi = np.full(len(x), np.inf)
    if bounds is None:
        return lo, hi
    items = bounds.items() if isinstance(bounds, Mapping) else zip(x.names, bounds)
    for name, b in items:
        if b is None:
            continue
        i = x.names.index(name)
        lo[i] = -np.inf if b[0] is None else b[0]
        hi[i] = np.inf if b[1] is None else b[1]
    if np.any(lo > hi):
        raise InvalidArgumentError("lower bound above upper bound")
    return lo, hi


def minimize_adam(objective: Objective, init: ParamVector, steps: int = 100, lr: float = 0.02,
                  bounds: Mapping[str, tuple[float, float]] | Sequence | None = None,
                  lr_final: float | None = None, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> tuple[ParamVector, OptimizerReport]:
    """Adam in normalized coordinates, projecting onto ``bounds`` after each step.

    ``lr_final`` enables a geometric decay of the step size from ``lr`` to
    ``lr_final`` over the run. Returns the best iterate seen, not the last.
    """
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    lo, hi = _bounds_arrays(init, bounds)
    scales = init.scales
    x = init.with_values(np.clip(init.values, lo, hi))
    loss, grad = _evaluate(objective, x, need_grad=True)

    report = OptimizerReport(evaluations=1)
    best_x, best_loss = x, loss
    m = np.zeros(len(x))
    v = np.zeros(len(x))
    decay = 1.0 if lr_final is None else (lr_final / lr) ** (1.0 / max(steps - 1, 1))
    step_lr = lr
    for t in range(1, steps + 1):
        g = grad * scales
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        u = x.values / scales - step_lr * mhat / (np.sqrt(vhat) + eps)
        trial = x.with_values(np.clip(u * scales, lo, hi))
        try:
            loss, grad = _evaluate(objective, trial, need_grad=True)
            x = trial
        except EvaluationError:
            # fall back to the best point with a smaller step
            report.nonfinite_steps += 1
            x = best_x
            loss, grad = _evaluate(objective, x, need_grad=True)
            step_lr *= 0.5
        report.evaluations += 1
        report.raw_losses.append(loss)
        if loss < best_loss:
            best_x, best_loss = x, loss
        report.trajectory.append(best_loss)
        step_lr *= decay

    report.iterations = steps
    report.final_loss = best_loss
    report.converged = bool(np.max(np.abs(grad * scales)) < 1e-6) or (
        steps > 10 and abs(report.trajectory[-11] - best_loss) <= 1e-9 * max(abs(best_loss), 1e-300)
    )
    return best_x, report


def nelder_mead(objective: Callable[[np.ndarray], float], init: ParamVector, max_evals: int = 2000,
                tol: float = 1e-8, initial_step: float = 0.05) -> tuple[ParamVector, OptimizerReport]:
    """Derivative-free simplex minimization.

    ``objective`` takes the value vector as a numpy array. Reflection 1,
    expansion 2, contraction 0.5, shrink 0.5; stops when the simplex diameter
    (normalized coordinates) falls below ``tol`` or after ``max_evals`` calls.
    """
    n = len(init)
    if n < 1:
        raise InvalidArgumentError("need at least one parameter")
    scales = init.scales
    report = OptimizerReport()

    def f(u: np.ndarray) -> float:
        report.evaluations += 1
        val = float(objective(u * scales))
        return val if math.isfinite(val) else math.inf

    u0 = init.values / scales
    f0 = f(u0)
    if not math.isfinite(f0):
        raise EvaluationError(f"objective is not finite at {init.as_dict()}", params=init.as_dict())

    simplex = [u0]
    for i in range(n):
        u = u0.copy()
        u[i] += initial_step if u[i] == 0 else initial_step * max(1.0, abs(u[i]))
        simplex.append(u)
    simplex = np.array(simplex)
    fvals = np.array([f0] + [f(s) for s in simplex[1:]])

    while True:
        order = np.argsort(fvals, kind="stable")
        simplex, fvals = simplex[order], fvals[order]
        report.iterations += 1
        report.trajectory.append(float(fvals[0]))
        diameter = np.max(np.linalg.norm(simplex[1:] - simplex[0], axis=1))
        if diameter < tol:
            report.converged = True
            break
        if report.evaluations >= max_evals:
            break
        if fvals[-1] == fvals[0] and report.iterations > 1 and np.all(np.isfinite(fvals)):
            # flat objective: shrinking cannot find a lower value
            simplex[1:] = simplex[0] + 0.5 * (simplex[1:] - simplex[0])
            fvals[1:] = [f(s) for s in simplex[1:]]
            continue

        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + (centroid - worst)
        fr = f(xr)
        if fr < fvals[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = f(xe)
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            fc = f(xc)
            if fc <= fr:
                simplex[-1], fvals[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (worst - centroid)
            fc = f(xc)
            if fc < fvals[-1]:
                simplex[-1], fvals[-1] = xc, fc
                continue
        simplex[1:] = simplex[0] + 0.5 * (simplex[1:] - simplex[0])
        fvals[1:] = [f(s) for s in simplex[1:]]

    best = int(np.argmin(fvals))
    if fvals[best] <= f0:
        u_best, f_best = simplex[best], float(fvals[best])
    else:
        u_best, f_best = u0, f0
    report.final_loss = f_best
    report.trajectory[-1] = min(report.trajectory[-1], f_best)
    return init.with_values(u_best * scales), report
