"""Constrained refinement of pseudo-probability targets.

Given a target matrix (forget rows = pseudo-probabilities, retain rows =
model outputs), the solver minimizes

    sum_{forget i} KL(Q_i || target_i) + lambda * sum_{retain i} KL(Q_i || target_i)

over row-stochastic Q subject to fixed per-class column masses M_k.  The
column constraints are handled by dual coordinate ascent: for fixed dual
vector alpha the Lagrangian minimizer over each row simplex is closed form,

    Q_ik  proportional to  target_ik * exp(-alpha_k / c_i),

with c_i = 1 on forget rows and lambda on retain rows, and alpha moves along
the constraint residual with step eta.  The objective is strictly convex
with linear constraints, so the iteration converges to the unique optimum
from any feasible start; starting at alpha = 0 makes the first iterate equal
the targets themselves (the warm start near the pseudo-probabilities).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (InfeasibleProblemError, NumericalOverflowError,
                     ShapeError, UsageError)
from .probmatrix import (FLOOR, ProbMatrix, class_mass, dump_probmatrix,
                         kl_rows)

EXP_CLAMP = 50.0
MASS_TOL = 1e-6


@dataclass
class RefineProblem:
    """One refinement instance: targets, row partition, retain weight, masses."""

    targets: ProbMatrix
    forget_rows: np.ndarray
    retain_rows: np.ndarray
    lam: float = 1.0
    mass: np.ndarray = None

    def __post_init__(self):
        self.forget_rows = np.asarray(self.forget_rows, dtype=np.int64)
        self.retain_rows = np.asarray(self.retain_rows, dtype=np.int64)
        n = self.targets.n_rows
        combined = np.concatenate([self.forget_rows, self.retain_rows])
        if not np.array_equal(np.sort(combined), np.arange(n)):
            raise UsageError("forget and retain rows must partition all rows")
        if self.lam <= 0:
            raise UsageError(f"retain weight must be positive, got {self.lam}")
        if self.mass is None:
            raise UsageError("a class-mass vector is required")
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if self.mass.shape != (self.targets.n_classes,):
            raise ShapeError(
                f"mass vector of shape {self.mass.shape} for "
                f"{self.targets.n_classes} classes"
            )
        if self.mass.min() < 0:
            raise UsageError("mass entries must be non-negative")

    @property
    def n_rows(self) -> int:
        return self.targets.n_rows

    def row_weights(self) -> np.ndarray:
        c = np.ones(self.n_rows)
        c[self.retain_rows] = self.lam
        return c


@dataclass
class DualState:
    """Dual vector alpha, step size eta, and the residual trace so far."""

    alpha: np.ndarray
    eta: float
    iterations: int = 0
    residuals: list = field(default_factory=list)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.eta <= 0:
            raise UsageError(f"step size must be positive, got {self.eta}")


@dataclass
class RefineConfig:
    tol: float = 1e-6
    max_iters: int = 10_000
    eta: float | None = None            # default 0.1 / N
    warm_start: ProbMatrix | None = None


@dataclass
class RefineResult:
    matrix: ProbMatrix
    dual: DualState
    objective: float
    converged: bool
    iterations: int
    eta_schedule: list = field(default_factory=list)


def objective(Q: ProbMatrix, problem: RefineProblem) -> float:
    """Forget-row KL sum plus lambda times the retain-row KL sum."""
    if Q.values.shape != problem.targets.values.shape:
        raise ShapeError(
            f"Q shape {Q.values.shape} does not match targets "
            f"{problem.targets.values.shape}"
        )
    per_row = kl_rows(Q, problem.targets)
    return float(per_row[problem.forget_rows].sum()
                 + problem.lam * per_row[problem.retain_rows].sum())


def primal_update(problem: RefineProblem, dual: DualState) -> ProbMatrix:
    """Row-wise Lagrangian minimizer Q_ik ~ target_ik * exp(-alpha_k / c_i).

    Exponents are clamped to [-EXP_CLAMP, EXP_CLAMP]; anything non-finite
    after clamping aborts.  With alpha = 0 the targets are returned bitwise.
    """
    alpha = dual.alpha
    if alpha.shape != (problem.targets.n_classes,):
        raise ShapeError(
            f"dual vector of length {alpha.shape} for "
            f"{problem.targets.n_classes} classes"
        )
    c = problem.row_weights()
    expo = np.clip(-alpha[None, :] / c[:, None], -EXP_CLAMP, EXP_CLAMP)
    if not np.isfinite(expo).all():
        raise NumericalOverflowError("non-finite exponent in primal update")
    if not expo.any():
        return problem.targets  # scaling by ones is the identity
    w = problem.targets.values * np.exp(expo)
    q = w / w.sum(axis=1, keepdims=True)
    return ProbMatrix._wrap(np.maximum(q, FLOOR), problem.targets.row_ids.copy())


def dual_step(dual: DualState, Q: ProbMatrix, mass: np.ndarray) -> DualState:
    """Ascend alpha along the column-mass residual and record its sup-norm.

    The residual trace is shared (not copied) between the old and new state,
    so long solver runs stay linear in the iteration count.
    """
    mass = np.asarray(mass, dtype=np.float64)
    grad = class_mass(Q) - mass
    if grad.shape != dual.alpha.shape:
        raise ShapeError(
            f"residual of shape {grad.shape} for dual of shape {dual.alpha.shape}"
        )
    dual.residuals.append(float(np.abs(grad).max()))
    return DualState(
        alpha=dual.alpha + dual.eta * grad,
        eta=dual.eta,
        iterations=dual.iterations + 1,
        residuals=dual.residuals,
    )


def refine(problem: RefineProblem, cfg: RefineConfig | None = None) -> RefineResult:
    """Alternate primal/dual updates until the column masses match.

    Stops when the sup-norm residual drops below ``cfg.tol`` or after
    ``cfg.max_iters`` primal updates; a residual increase halves eta.  The
    result carries the best (lowest-residual) iterate when not converged.
    """
    cfg = cfg or RefineConfig()
    n = problem.n_rows
    mass_gap = abs(float(problem.mass.sum()) - n)
    if mass_gap > MASS_TOL:
        raise InfeasibleProblemError(
            f"class masses sum to {problem.mass.sum():.9g} for {n} rows "
            f"(gap {mass_gap:.3g})"
        )
    eta = cfg.eta if cfg.eta is not None else 0.1 / n
    dual = DualState(alpha=np.zeros(problem.targets.n_classes), eta=eta)
    eta_schedule = [(0, eta)]
    if cfg.warm_start is not None and (
            cfg.warm_start.values.shape != problem.targets.values.shape):
        raise ShapeError("warm start shape does not match targets")

    best_q, best_resid = None, np.inf
    converged = False
    iterations = 0
    q = problem.targets
    for it in range(1, cfg.max_iters + 1):
        iterations = it
        if it == 1 and cfg.warm_start is not None:
            q = cfg.warm_start
        else:
            q = primal_update(problem, dual)
        resid = float(np.abs(class_mass(q) - problem.mass).max())
        if resid < best_resid:
            best_q, best_resid = q, resid
        if resid <= cfg.tol:
            dual.residuals.append(resid)
            converged = True
            break
        if dual.residuals and resid > dual.residuals[-1]:
            dual.eta /= 2.0
            eta_schedule.append((it, dual.eta))
        dual = dual_step(dual, q, problem.mass)

    final_q = q if converged else best_q
    return RefineResult(
        matrix=final_q,
        dual=dual,
        objective=objective(final_q, problem),
        converged=converged,
        iterations=iterations,
        eta_schedule=eta_schedule,
    )


def problem_from_outputs(outputs: ProbMatrix, targets: ProbMatrix,
                         forget_rows, retain_rows, lam: float = 1.0) -> RefineProblem:
    """Build a problem whose masses come from the original model outputs.

    Using the original outputs guarantees sum_k M_k = N, i.e. feasibility.
    """
    return RefineProblem(
        targets=targets,
        forget_rows=forget_rows,
        retain_rows=retain_rows,
        lam=lam,
        mass=class_mass(outputs),
    )


def save_refine_result(result: RefineResult, prefix) -> None:
    """Persist a result: <prefix>.pmx (matrix dump) + <prefix>.json record
    holding objective, iterations, residual history, alpha and the eta
    schedule."""
    dump_probmatrix(result.matrix, str(prefix) + ".pmx")
    record = {
        "objective": result.objective,
        "converged": result.converged,
        "iterations": result.iterations,
        "residuals": list(result.dual.residuals),
        "alpha": result.dual.alpha.tolist(),
        "eta_schedule": [[it, eta] for it, eta in result.eta_schedule],
    }
    with open(str(prefix) + ".json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
