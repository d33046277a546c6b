"""Batch MAP solvers (Gauss-Newton, Levenberg-Marquardt) over a FactorGraph."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .graph import FactorGraph, LinearSystem, apply_step, linearize, total_cost

logger = logging.getLogger(__name__)


class SolverError(Exception):
    pass


class RankDeficiencyError(SolverError, np.linalg.LinAlgError):
    def __init__(self, message: str, keys=()):
        super().__init__(message)
        self.keys = tuple(keys)


class StallError(SolverError):
    pass


@dataclass
class SolverConfig:
    max_iterations: int = 100
    abs_cost_tol: float = 1e-9
    rel_cost_tol: float = 1e-6
    lm_initial_lambda: float = 1e-4
    lm_lambda_factor: float = 10.0
    lm_max_lambda: float = 1e12
    grad_tol: float = 1e-10
    gn_max_halvings: int = 30

    def __post_init__(self):
        if self.max_iterations < 1 or self.gn_max_halvings < 0:
            raise ValueError("max_iterations must be >= 1 and gn_max_halvings >= 0")
        for name in ("abs_cost_tol", "rel_cost_tol", "lm_initial_lambda", "grad_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.lm_lambda_factor > 1:
            raise ValueError("lm_lambda_factor must exceed 1")


@dataclass
class SolveResult:
    solution: dict
    cost_history: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    @property
    def final_cost(self) -> float:
        return self.cost_history[-1]


def _unconstrained_keys(system: LinearSystem, columns) -> list:
    return sorted({system.key_at_column(int(c)) for c in columns})


def solve_linear(system: LinearSystem, damping: float = 0.0) -> np.ndarray:
    """Least-squares step for ``||A dx - b||^2`` via the normal equations.

    With ``damping > 0`` solves ``(A^T A + damping * diag(A^T A)) dx = A^T b``.
    """
    A = system.A
    n = A.shape[1]
    if n == 0:
        return np.zeros(0)
    H = (A.T @ A).tocsc()
    g = A.T @ system.b
    diag = H.diagonal()
    empty = np.flatnonzero(diag <= 0.0)
    if empty.size:
        keys = _unconstrained_keys(system, empty)
        raise RankDeficiencyError(
            "system is rank deficient; unconstrained variables: " + ", ".join(map(str, keys)), keys
        )
    if damping > 0.0:
        H = H + sp.diags(damping * diag, format="csc")
    try:
        lu = spla.splu(H, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise RankDeficiencyError(f"normal equations are singular: {exc}") from None
    pivots = np.abs(lu.U.diagonal())
    bad = np.flatnonzero(pivots <= 1e-13 * max(pivots.max(), 1.0))
    if bad.size:
        cols = lu.perm_c[bad]
        keys = _unconstrained_keys(system, cols)
        raise RankDeficiencyError(
            "normal equations are numerically singular near: " + ", ".join(map(str, keys)), keys
        )
    step = lu.solve(g)
    if not np.all(np.isfinite(step)):
        raise RankDeficiencyError("linear solve produced non-finite step")
    return step


def _converged(prev: float, cur: float, cfg: SolverConfig) -> bool:
    delta = abs(prev - cur)
    return delta <= cfg.abs_cost_tol or delta <= cfg.rel_cost_tol * max(abs(prev), 1e-300)


def _gradient_small(system: LinearSystem, cost: float, cfg: SolverConfig) -> bool:
    if system.A.shape[0] == 0:
        return True
    g = system.A.T @ system.b
    return float(np.linalg.norm(g)) <= cfg.grad_tol * (1.0 + cost)


def _prepare(graph: FactorGraph, init):
    graph.validate()
    theta = {k: np.array(np.atleast_1d(init[k]), dtype=float, copy=True) for k in graph.variables}
    return theta


def gauss_newton(graph: FactorGraph, init, cfg: SolverConfig | None = None, fixed: Iterable = ()) -> SolveResult:
    """Undamped Gauss-Newton iterations until the cost change is within tolerance."""
    cfg = cfg or SolverConfig()
    fixed = frozenset(fixed)
    theta = _prepare(graph, init)
    cost = total_cost(graph, theta)
    history = [cost]
    for it in range(1, cfg.max_iterations + 1):
        system = linearize(graph, theta, fixed)
        if _gradient_small(system, cost, cfg):
            return SolveResult(theta, history, True, it - 1)
        step = solve_linear(system)
        # full step first; halve it while the cost goes up (hinge kinks can
        # make the undamped step overshoot)
        alpha = 1.0
        for _ in range(cfg.gn_max_halvings + 1):
            candidate = apply_step(theta, alpha * step, system)
            new_cost = total_cost(graph, candidate)
            if new_cost <= cost:
                break
            alpha *= 0.5
        else:
            return SolveResult(theta, history, False, it)
        theta = candidate
        history.append(new_cost)
        done = _converged(cost, new_cost, cfg)
        cost = new_cost
        if done:
            return SolveResult(theta, history, True, it)
    return SolveResult(theta, history, False, cfg.max_iterations)


def levenberg_marquardt(graph: FactorGraph, init, cfg: SolverConfig | None = None, fixed: Iterable = ()) -> SolveResult:
    """Damped Gauss-Newton; steps are kept only when they lower the cost."""
    cfg = cfg or SolverConfig()
    fixed = frozenset(fixed)
    theta = _prepare(graph, init)
    cost = total_cost(graph, theta)
    history = [cost]
    lam = cfg.lm_initial_lambda
    for it in range(1, cfg.max_iterations + 1):
        system = linearize(graph, theta, fixed)
        if _gradient_small(system, cost, cfg):
            return SolveResult(theta, history, True, it - 1)
        while True:
            step = solve_linear(system, damping=lam)
            candidate = apply_step(theta, step, system)
            new_cost = total_cost(graph, candidate)
            if new_cost < cost:
                lam = max(lam / cfg.lm_lambda_factor, 1e-12)
                break
            # predicted decrease of the quadratic model
            Ad = system.A @ step
            predicted = 0.5 * float(system.b @ system.b) - 0.5 * float((Ad - system.b) @ (Ad - system.b))
            if predicted <= cfg.abs_cost_tol or predicted <= cfg.rel_cost_tol * cost:
                return SolveResult(theta, history, True, it - 1)
            lam *= cfg.lm_lambda_factor
            if lam > cfg.lm_max_lambda:
                raise StallError(f"damping exceeded {cfg.lm_max_lambda:g} without an accepted step (cost {cost:.6g})")
        theta = candidate
        history.append(new_cost)
        done = _converged(cost, new_cost, cfg)
        cost = new_cost
        if done:
            return SolveResult(theta, history, True, it)
    return SolveResult(theta, history, False, cfg.max_iterations)


def solve(graph: FactorGraph, init, cfg: SolverConfig | None = None, method: str = "lm", fixed: Iterable = ()) -> SolveResult:
    if method == "lm":
        return levenberg_marquardt(graph, init, cfg, fixed)
    if method == "gn":
        return gauss_newton(graph, init, cfg, fixed)
    raise ValueError(f"unknown solver method {method!r}")
