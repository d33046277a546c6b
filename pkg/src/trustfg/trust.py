"""Inter-agent trust terms: proximity safety, consistency and transparency.

Proximity and consistency are optimizable factors.  Transparency is handled
before optimization: an agent whose shared trajectory disagrees with what
the others observe gets wider proximity margins.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .graph import Factor, NoiseModel, VarKey


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class TrustParams:
    eps_proximity: float = 0.1
    sigma_proximity: float = 0.01
    sigma_consistency: float = 0.5
    consistency_range: float = 1.0
    transparency_beta: float = 2.5
    transparency_tol: float = 0.05

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TransparencyReport:
    discrepancy: dict = field(default_factory=dict)  # agent id -> delta in [0, 1]
    thresholds: dict = field(default_factory=dict)  # (a, b) with a < b -> inflated eps
    trust_scores: dict = field(default_factory=dict)

    def threshold(self, a: int, b: int, default: float) -> float:
        return self.thresholds.get((min(a, b), max(a, b)), default)

    def to_json(self) -> dict:
        return {
            "discrepancy": {str(k): v for k, v in sorted(self.discrepancy.items())},
            "thresholds": [
                {"agents": [a, b], "eps": eps} for (a, b), eps in sorted(self.thresholds.items())
            ],
            "trust_scores": {str(k): v for k, v in sorted(self.trust_scores.items())},
        }


def proximity_hinge(d: float, eps: float) -> float:
    if not eps > 0:
        raise ValueError("eps must be positive")
    return eps - d if d <= eps else 0.0


class ProximityFactor(Factor):
    """Hinge on the surface gap between two disc robots at the same time step."""

    kind = "proximity"

    def __init__(self, key_a: VarKey, key_b: VarKey, radius_a: float, radius_b: float, eps: float, sigma: float):
        self.radii = (radius_a, radius_b)
        self.eps = eps
        super().__init__([key_a, key_b], NoiseModel.isotropic(sigma, 1))

    def _gap(self, xs):
        diff = xs[0][:2] - xs[1][:2]
        dist = math.hypot(diff[0], diff[1])
        return dist - self.radii[0] - self.radii[1], diff, dist

    def residual(self, xs):
        gap, _, _ = self._gap(xs)
        return np.array([proximity_hinge(gap, self.eps)])

    def jacobians(self, xs):
        gap, diff, dist = self._gap(xs)
        Ja = np.zeros((1, xs[0].shape[0]))
        Jb = np.zeros((1, xs[1].shape[0]))
        if gap < self.eps:
            u = diff / dist if dist > 0 else np.array([1.0, 0.0])
            Ja[0, :2] = -u
            Jb[0, :2] = u
        return [Ja, Jb]

    @classmethod
    def prepare_batch(cls, factors):
        return np.array([sum(f.radii) for f in factors]), np.array([f.eps for f in factors])

    @classmethod
    def evaluate_batch(cls, ctx, xs, jacobians=True):
        reach, eps = ctx
        diff = xs[0][:, :2] - xs[1][:, :2]
        dist = np.hypot(diff[:, 0], diff[:, 1])
        gap = dist - reach
        r = np.where(gap <= eps, eps - gap, 0.0)[:, None]
        if not jacobians:
            return r, None
        safe = np.where(dist > 0, dist, 1.0)
        u = np.where((dist > 0)[:, None], diff / safe[:, None], np.array([1.0, 0.0]))
        u = np.where((gap < eps)[:, None], u, 0.0)
        Ja = np.zeros((len(gap), 1, xs[0].shape[1]))
        Jb = np.zeros((len(gap), 1, xs[1].shape[1]))
        Ja[:, 0, :2] = -u
        Jb[:, 0, :2] = u
        return r, [Ja, Jb]


def _check_aligned(trajs) -> tuple[int, float]:
    if not trajs:
        return 0, 0.0
    n, dt = len(trajs[0]), trajs[0].dt
    for t in trajs[1:]:
        if len(t) != n or not math.isclose(t.dt, dt, rel_tol=0, abs_tol=1e-12):
            raise AlignmentError(
                f"agent {t.agent_id} has N={len(t)}, dt={t.dt}; expected N={n}, dt={dt}"
            )
    return n, dt


def make_proximity_factors(trajs, params: TrustParams, radii: Mapping[int, float], eps_per_pair: Mapping | None = None) -> list:
    """One factor per time step and unordered agent pair."""
    n, _ = _check_aligned(trajs)
    eps_per_pair = eps_per_pair or {}
    factors = []
    for ta, tb in itertools.combinations(trajs, 2):
        a, b = ta.agent_id, tb.agent_id
        eps = eps_per_pair.get((min(a, b), max(a, b)), params.eps_proximity)
        for k in range(n):
            factors.append(
                ProximityFactor(VarKey(a, k), VarKey(b, k), radii[a], radii[b], eps, params.sigma_proximity)
            )
    return factors


def acceleration(s_k, s_next, dt: float) -> np.ndarray:
    """Finite-difference acceleration between adjacent states."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    v0 = s_k.velocity if hasattr(s_k, "velocity") else np.asarray(s_k, dtype=float)[2:4]
    v1 = s_next.velocity if hasattr(s_next, "velocity") else np.asarray(s_next, dtype=float)[2:4]
    return (v1 - v0) / dt


def consistency_weight(distance: float, length_scale: float) -> float:
    return math.exp(-distance / length_scale)


class ConsistencyFactor(Factor):
    """Weighted difference of two agents' accelerations over the same step.

    The weight is fixed at construction; callers rebuild the factor when the
    pair distance it was computed from changes.
    """

    kind = "consistency"

    def __init__(self, a: int, b: int, k: int, dt: float, weight: float, sigma: float):
        self.dt = dt
        self.weight = weight
        keys = [VarKey(a, k), VarKey(a, k + 1), VarKey(b, k), VarKey(b, k + 1)]
        super().__init__(keys, NoiseModel.isotropic(sigma, 2))
        c = weight / dt
        E = np.zeros((2, 4))
        E[:, 2:] = np.eye(2)
        self._J = [-c * E, c * E, c * E, -c * E]

    def residual(self, xs):
        acc_a = (xs[1][2:4] - xs[0][2:4]) / self.dt
        acc_b = (xs[3][2:4] - xs[2][2:4]) / self.dt
        return self.weight * (acc_a - acc_b)

    def jacobians(self, xs):
        return [J.copy() for J in self._J]

    @classmethod
    def prepare_batch(cls, factors):
        w = np.array([f.weight for f in factors])
        dt = np.array([f.dt for f in factors])
        J = [np.array([f._J[j] for f in factors]) for j in range(4)]
        return w, dt, J

    @classmethod
    def evaluate_batch(cls, ctx, xs, jacobians=True):
        w, dt, J = ctx
        acc_a = (xs[1][:, 2:4] - xs[0][:, 2:4]) / dt[:, None]
        acc_b = (xs[3][:, 2:4] - xs[2][:, 2:4]) / dt[:, None]
        r = w[:, None] * (acc_a - acc_b)
        return r, (J if jacobians else None)


def make_consistency_factors(trajs, params: TrustParams, weights_from=None) -> list:
    """Factors for every step and agent pair, weighted by ``exp(-d_k / range)``
    with ``d_k`` the center distance at step ``k``.

    Distances come from ``weights_from`` (same agent order) when given,
    otherwise from ``trajs``.
    """
    n, dt = _check_aligned(trajs)
    source = {t.agent_id: t for t in (weights_from if weights_from is not None else trajs)}
    factors = []
    for ta, tb in itertools.combinations(trajs, 2):
        pa, pb = source[ta.agent_id].positions, source[tb.agent_id].positions
        for k in range(n - 1):
            d = float(np.linalg.norm(pa[k] - pb[k]))
            w = consistency_weight(d, params.consistency_range)
            factors.append(ConsistencyFactor(ta.agent_id, tb.agent_id, k, dt, w, params.sigma_consistency))
    return factors


def compute_discrepancy(shared, observed_positions, tol: float) -> float:
    """Fraction of time steps where shared and observed positions disagree by more than ``tol``."""
    shared_pos = shared.positions if hasattr(shared, "positions") else np.asarray(shared, dtype=float)
    observed = np.asarray(observed_positions, dtype=float)
    if shared_pos.shape != observed.shape:
        raise AlignmentError(f"shared has {len(shared_pos)} points, observed has {len(observed)}")
    if len(shared_pos) == 0:
        return 0.0
    err = np.linalg.norm(shared_pos - observed, axis=1)
    return float(np.count_nonzero(err > tol)) / len(err)


def inflate_epsilon(eps: float, delta_a: float, delta_b: float, beta: float) -> float:
    for d in (delta_a, delta_b):
        if not 0.0 <= d <= 1.0:
            raise ValueError("discrepancy must lie in [0, 1]")
    if not eps > 0 or beta < 0:
        raise ValueError("eps must be positive and beta non-negative")
    return eps * (1.0 + beta * max(delta_a, delta_b))


def transparency_thresholds(agent_ids: Sequence[int], discrepancy: Mapping[int, float], params: TrustParams) -> dict:
    out = {}
    for a, b in itertools.combinations(sorted(agent_ids), 2):
        out[(a, b)] = inflate_epsilon(
            params.eps_proximity, discrepancy.get(a, 0.0), discrepancy.get(b, 0.0), params.transparency_beta
        )
    return out


def trust_scores(trajs, radii: Mapping[int, float], discrepancy: Mapping[int, float], params: TrustParams) -> dict:
    """Per-agent summary score in [0, 1].

    ``1 - min(1, delta_a + v_a)`` where ``v_a`` is agent a's mean same-step
    proximity violation divided by the proximity margin.
    """
    n, _ = _check_aligned(trajs)
    violation = {t.agent_id: 0.0 for t in trajs}
    for ta, tb in itertools.combinations(trajs, 2):
        gaps = np.linalg.norm(ta.positions - tb.positions, axis=1) - radii[ta.agent_id] - radii[tb.agent_id]
        v = float(np.clip(params.eps_proximity - gaps, 0.0, None).sum()) / (params.eps_proximity * n)
        violation[ta.agent_id] += v
        violation[tb.agent_id] += v
    scores = {}
    for t in trajs:
        a = t.agent_id
        scores[a] = 1.0 - min(1.0, discrepancy.get(a, 0.0) + violation[a])
    return scores
