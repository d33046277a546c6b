"""Constant-velocity Gaussian-process prior over planar trajectories."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Factor, NoiseModel, StateVariable, VarKey


@dataclass
class Trajectory:
    agent_id: int
    dt: float
    states: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.states) < 2:
            raise ValueError("trajectory needs at least two states")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        self.states = [s if isinstance(s, StateVariable) else StateVariable.from_vector(s) for s in self.states]

    def __len__(self) -> int:
        return len(self.states)

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.states])

    @property
    def velocities(self) -> np.ndarray:
        return np.array([s.velocity for s in self.states])

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.states)) * self.dt

    def as_array(self) -> np.ndarray:
        return np.array([s.as_vector() for s in self.states])

    @classmethod
    def from_array(cls, agent_id: int, dt: float, array) -> "Trajectory":
        return cls(agent_id, dt, [StateVariable.from_vector(row) for row in np.asarray(array, dtype=float)])

    def keys(self) -> list:
        return [VarKey(self.agent_id, k) for k in range(len(self.states))]

    def assignment(self) -> dict:
        return {VarKey(self.agent_id, k): s.as_vector() for k, s in enumerate(self.states)}

    @classmethod
    def from_assignment(cls, agent_id: int, dt: float, n: int, theta) -> "Trajectory":
        return cls.from_array(agent_id, dt, [theta[VarKey(agent_id, k)] for k in range(n)])


@dataclass(frozen=True)
class GPPriorParams:
    qc: float = 1.0
    anchor_pos_sigma: float = 1e-4
    anchor_vel_sigma: float = 1e-2

    def __post_init__(self):
        for name in ("qc", "anchor_pos_sigma", "anchor_vel_sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def constant_velocity_transition(dt: float, qc: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Transition ``Phi`` and process noise ``Q`` of white-noise-on-acceleration.

    State layout is (x, y, vx, vy).
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    I2 = np.eye(2)
    Phi = np.block([[I2, dt * I2], [np.zeros((2, 2)), I2]])
    Q = qc * np.block([
        [dt**3 / 3.0 * I2, dt**2 / 2.0 * I2],
        [dt**2 / 2.0 * I2, dt * I2],
    ])
    return Phi, Q


class GPPriorFactor(Factor):
    """Binary factor ``r = x_{k+1} - Phi x_k`` with noise ``Q``."""

    kind = "gp_prior"

    def __init__(self, key_k: VarKey, key_next: VarKey, dt: float, qc: float = 1.0):
        self.Phi, Q = constant_velocity_transition(dt, qc)
        self.dt = dt
        super().__init__([key_k, key_next], NoiseModel(Q))

    def residual(self, xs):
        return xs[1] - self.Phi @ xs[0]

    def jacobians(self, xs):
        return [-self.Phi, np.eye(4)]

    @classmethod
    def prepare_batch(cls, factors):
        return np.array([f.Phi for f in factors])

    @classmethod
    def evaluate_batch(cls, Phi, xs, jacobians=True):
        r = xs[1] - np.einsum("nij,nj->ni", Phi, xs[0])
        if not jacobians:
            return r, None
        return r, [-Phi, np.broadcast_to(np.eye(4), Phi.shape)]


class AnchorFactor(Factor):
    """Unary prior ``r = x - mean``."""

    kind = "anchor"

    def __init__(self, key: VarKey, mean, noise: NoiseModel):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float)).copy()
        super().__init__([key], noise)

    def residual(self, xs):
        return xs[0] - self.mean

    def jacobians(self, xs):
        return [np.eye(self.mean.shape[0])]

    @classmethod
    def prepare_batch(cls, factors):
        return np.array([f.mean for f in factors])

    @classmethod
    def evaluate_batch(cls, mean, xs, jacobians=True):
        r = xs[0] - mean
        if not jacobians:
            return r, None
        n, d = mean.shape
        return r, [np.broadcast_to(np.eye(d), (n, d, d))]


def make_anchor(key: VarKey, state, params: GPPriorParams) -> AnchorFactor:
    if isinstance(state, StateVariable):
        state = state.as_vector()
    p, v = params.anchor_pos_sigma, params.anchor_vel_sigma
    return AnchorFactor(key, state, NoiseModel.diagonal([p, p, v, v]))


def make_gp_prior_factors(traj: Trajectory, params: GPPriorParams, start=None, goal=None) -> list:
    """GP chain over the trajectory plus start and goal anchors.

    ``start``/``goal`` default to the trajectory's own end states.
    """
    keys = traj.keys()
    factors: list = [GPPriorFactor(a, b, traj.dt, params.qc) for a, b in zip(keys[:-1], keys[1:])]
    factors.append(make_anchor(keys[0], traj.states[0] if start is None else start, params))
    factors.append(make_anchor(keys[-1], traj.states[-1] if goal is None else goal, params))
    return factors


def resample_polyline(traj, resolution: float) -> np.ndarray:
    """Piecewise-linear resampling with spacing at most ``resolution``."""
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    pts = traj.positions if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / resolution - 1e-12)))
        t = np.arange(1, n + 1)[:, None] / n
        out.extend(a + t * (b - a))
    return np.array(out)
