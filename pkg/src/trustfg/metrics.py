"""Evaluation of optimized trajectories.

Two distance notions are reported:

* spatial: minimum distance between two agents' polylines regardless of when
  each agent is where (``min_distance_matrix``);
* synchronized: minimum distance between the agents at the same instant,
  with positions moving linearly between support times
  (``closest_approach_matrix``).  This is the one that measures collisions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .trust import AlignmentError


def _radii(trajs, radii) -> list:
    if radii is None:
        return [0.0] * len(trajs)
    if np.isscalar(radii):
        return [float(radii)] * len(trajs)
    if isinstance(radii, dict):
        return [float(radii[t.agent_id]) for t in trajs]
    return [float(r) for r in radii]


def _points(t) -> np.ndarray:
    return t.positions if hasattr(t, "positions") else np.asarray(t, dtype=float)


def point_segment_distance(p, a, b) -> np.ndarray:
    """Distance from points ``p`` to segments ``a -> b`` (broadcasting)."""
    p, a, b = np.asarray(p, float), np.asarray(a, float), np.asarray(b, float)
    ab = b - a
    denom = np.einsum("...i,...i->...", ab, ab)
    t = np.einsum("...i,...i->...", p - a, ab) / np.where(denom > 0, denom, 1.0)
    t = np.clip(np.where(denom > 0, t, 0.0), 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(p - proj, axis=-1)


def _cross(u, v):
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def segment_distance(a0, a1, b0, b1) -> np.ndarray:
    """Exact distance between 2D segments ``a0-a1`` and ``b0-b1`` (broadcasting)."""
    a0, a1, b0, b1 = (np.asarray(x, float) for x in (a0, a1, b0, b1))
    d = np.minimum.reduce([
        point_segment_distance(a0, b0, b1),
        point_segment_distance(a1, b0, b1),
        point_segment_distance(b0, a0, a1),
        point_segment_distance(b1, a0, a1),
    ])
    # proper crossings; touching cases are already zero above
    o1 = _cross(a1 - a0, b0 - a0)
    o2 = _cross(a1 - a0, b1 - a0)
    o3 = _cross(b1 - b0, a0 - b0)
    o4 = _cross(b1 - b0, a1 - b0)
    crossing = (o1 * o2 < 0) & (o3 * o4 < 0)
    return np.where(crossing, 0.0, d)


def polyline_distance(p, q) -> float:
    p, q = _points(p), _points(q)
    if len(p) == 1 or len(q) == 1:
        if len(p) == 1 and len(q) == 1:
            return float(np.linalg.norm(p[0] - q[0]))
        pt, line = (p[0], q) if len(p) == 1 else (q[0], p)
        return float(point_segment_distance(pt, line[:-1], line[1:]).min())
    d = segment_distance(p[:-1, None], p[1:, None], q[None, :-1], q[None, 1:])
    return float(d.min())


def min_distance_matrix(trajs: Sequence, radii=None) -> np.ndarray:
    """Spatial surface-to-surface minimum distance between every pair of polylines."""
    r = _radii(trajs, radii)
    m = len(trajs)
    out = np.zeros((m, m))
    for i, j in itertools.combinations(range(m), 2):
        d = max(0.0, polyline_distance(trajs[i], trajs[j]) - r[i] - r[j])
        out[i, j] = out[j, i] = d
    return out


def _synchronized_pair(p: np.ndarray, q: np.ndarray) -> float:
    rel = p - q
    if len(rel) == 1:
        return float(np.linalg.norm(rel[0]))
    return float(point_segment_distance(np.zeros(2), rel[:-1], rel[1:]).min())


def closest_approach_matrix(trajs: Sequence, radii=None) -> np.ndarray:
    """Synchronized surface-to-surface minimum distance.

    Between support times both agents move linearly, so their relative
    position traces a polyline and the closest approach is its distance to
    the origin.
    """
    n = {len(_points(t)) for t in trajs}
    if len(n) > 1:
        raise AlignmentError("trajectories must share the number of support states")
    r = _radii(trajs, radii)
    m = len(trajs)
    out = np.zeros((m, m))
    for i, j in itertools.combinations(range(m), 2):
        d = _synchronized_pair(_points(trajs[i]), _points(trajs[j])) - r[i] - r[j]
        out[i, j] = out[j, i] = max(0.0, d)
    return out


def support_distance_matrix(trajs: Sequence, radii=None) -> np.ndarray:
    """Surface distance at the support times only (what the proximity factors see)."""
    r = _radii(trajs, radii)
    m = len(trajs)
    out = np.zeros((m, m))
    for i, j in itertools.combinations(range(m), 2):
        d = np.linalg.norm(_points(trajs[i]) - _points(trajs[j]), axis=1).min() - r[i] - r[j]
        out[i, j] = out[j, i] = max(0.0, float(d))
    return out


def global_min(matrix: np.ndarray) -> float:
    m = matrix.shape[0]
    if m < 2:
        return float("inf")
    return float(matrix[np.triu_indices(m, 1)].min())


# --- violations --------------------------------------------------------------


@dataclass(frozen=True)
class ViolationSegment:
    agent: int
    other: int
    interval: tuple  # arc length on the agent's polyline
    other_interval: tuple  # arc length on the other polyline
    min_distance: float


def _capsule_intervals(a0, a1, b0, b1, thr):
    """Parameter intervals ``[t0, t1]`` of segments ``a0 + t (a1 - a0)`` lying
    within ``thr`` of segments ``b0-b1`` (all arrays broadcast together).

    The thr-neighbourhood of a segment is a capsule: a rectangle plus two
    discs.  Being convex, its intersection with a line is one interval, the
    hull of the three pieces' intervals.  Empty intervals come back with
    ``t0 > t1``.
    """
    d = a1 - a0
    lo = np.full(np.broadcast_shapes(a0.shape[:-1], b0.shape[:-1]), np.inf)
    hi = np.full_like(lo, -np.inf)

    def disc(c):
        f = a0 - c
        A = np.einsum("...i,...i->...", d, d)
        B = 2 * np.einsum("...i,...i->...", f, d)
        C = np.einsum("...i,...i->...", f, f) - thr**2
        with np.errstate(divide="ignore", invalid="ignore"):
            disc_ = B * B - 4 * A * C
            root = np.sqrt(np.where(disc_ > 0, disc_, 0.0))
            t0 = np.where(A > 0, (-B - root) / (2 * A), -np.inf)
            t1 = np.where(A > 0, (-B + root) / (2 * A), np.inf)
        ok = np.where(A > 0, disc_ > 0, C < 0)
        return np.where(ok, t0, np.inf), np.where(ok, t1, -np.inf)

    for c in (b0, b1):
        t0, t1 = disc(c)
        lo, hi = np.minimum(lo, t0), np.maximum(hi, t1)

    e = b1 - b0
    L = np.linalg.norm(e, axis=-1)
    safe = np.where(L > 0, L, 1.0)
    ux = e / safe[..., None]
    vx = np.stack([-ux[..., 1], ux[..., 0]], axis=-1)
    rel = a0 - b0
    u0 = np.einsum("...i,...i->...", rel, ux)
    du = np.einsum("...i,...i->...", d, ux)
    v0 = np.einsum("...i,...i->...", rel, vx)
    dv = np.einsum("...i,...i->...", d, vx)
    r0 = np.full_like(lo, -np.inf)
    r1 = np.full_like(lo, np.inf)
    # 0 < u0 + t du < L  and  -thr < v0 + t dv < thr
    for c0, dc, low, high in ((u0, du, 0.0, L), (v0, dv, -thr, thr)):
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (low - c0) / dc
            tb = (high - c0) / dc
        moving = dc != 0
        inside = (c0 > low) & (c0 < high)
        r0 = np.where(moving, np.maximum(r0, np.minimum(ta, tb)), np.where(inside, r0, np.inf))
        r1 = np.where(moving, np.minimum(r1, np.maximum(ta, tb)), np.where(inside, r1, -np.inf))
    rect = (L > 0) & (r0 < r1)
    lo = np.where(rect, np.minimum(lo, r0), lo)
    hi = np.where(rect, np.maximum(hi, r1), hi)
    return np.clip(lo, 0.0, None), np.clip(hi, None, 1.0)


def _merge(intervals, gap=1e-9):
    merged = []
    for lo, hi in sorted(intervals):
        if merged and lo <= merged[-1][1] + gap:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return [tuple(m) for m in merged]


def _arc_lengths(p) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])


def proximity_violations(trajs: Sequence, threshold: float, radii=None) -> list:
    """Maximal stretches of each polyline lying within ``threshold`` (surface
    distance) of another agent's polyline, in arc length."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    r = _radii(trajs, radii)
    out = []
    for i, j in itertools.permutations(range(len(trajs)), 2):
        p, q = _points(trajs[i]), _points(trajs[j])
        thr = threshold + r[i] + r[j]
        sp, sq = _arc_lengths(p), _arc_lengths(q)
        pieces, other = [], []
        t0, t1 = _capsule_intervals(p[:-1, None], p[1:, None], q[None, :-1], q[None, 1:], thr)
        seg_len = np.diff(sp)
        for k, s_idx in zip(*np.nonzero(t0 < t1)):
            lo_k = sp[k] + t0[k, s_idx] * seg_len[k]
            hi_k = sp[k] + t1[k, s_idx] * seg_len[k]
            pieces.append((lo_k, hi_k))
            other.append((s_idx, lo_k, hi_k))
        for lo, hi in _merge(pieces):
            segs = sorted({s for s, a, b in other if a >= lo - 1e-9 and b <= hi + 1e-9})
            span = (float(sq[segs[0]]), float(sq[segs[-1] + 1]))
            pts = arc_slice(p, lo, hi)
            dmin = polyline_distance(pts, q[segs[0]:segs[-1] + 2]) - r[i] - r[j]
            out.append(ViolationSegment(
                trajs[i].agent_id if hasattr(trajs[i], "agent_id") else i,
                trajs[j].agent_id if hasattr(trajs[j], "agent_id") else j,
                (float(lo), float(hi)),
                span,
                max(0.0, dmin),
            ))
    return out


def arc_slice(p, lo: float, hi: float) -> np.ndarray:
    """Sub-polyline of ``p`` between arc lengths ``lo`` and ``hi``."""
    p = np.asarray(p, dtype=float)
    s = _arc_lengths(p)

    def at(x):
        k = min(max(int(np.searchsorted(s, x, side="right")) - 1, 0), len(p) - 2)
        seg = s[k + 1] - s[k]
        return p[k] if seg == 0 else p[k] + (x - s[k]) / seg * (p[k + 1] - p[k])

    inner = [p[k] for k in range(len(p)) if lo < s[k] < hi]
    return np.array([at(lo), *inner, at(hi)])


def violation_length(violations, agent) -> float:
    return sum(v.interval[1] - v.interval[0] for v in violations if v.agent == agent)


# --- consistency -------------------------------------------------------------


@dataclass(frozen=True)
class InconsistencySamples:
    eligible: int
    exceeding: int

    @property
    def empty(self) -> bool:
        return self.eligible == 0

    @property
    def fraction(self) -> float:
        return 0.0 if self.eligible == 0 else self.exceeding / self.eligible


def inconsistency_samples(trajs: Sequence, dt: float, threshold: float = 0.5, length_scale: float = 1.0) -> InconsistencySamples:
    """Count (pair, step) samples with the pair closer than ``length_scale``
    and the acceleration difference above ``threshold``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = {len(t) for t in trajs}
    if len(n) > 1:
        raise AlignmentError("trajectories must share the number of support states")
    eligible = exceeding = 0
    for ta, tb in itertools.combinations(trajs, 2):
        acc_a = np.diff(ta.velocities, axis=0) / dt
        acc_b = np.diff(tb.velocities, axis=0) / dt
        dist = np.linalg.norm(ta.positions - tb.positions, axis=1)[:-1]
        mask = dist < length_scale
        diff = np.linalg.norm(acc_a - acc_b, axis=1)
        eligible += int(mask.sum())
        exceeding += int((mask & (diff > threshold)).sum())
    return InconsistencySamples(eligible, exceeding)


def inconsistency_metric(trajs: Sequence, dt: float, threshold: float = 0.5, length_scale: float = 1.0) -> float:
    return inconsistency_samples(trajs, dt, threshold, length_scale).fraction


# --- reporting ---------------------------------------------------------------


def metrics_report(trajs, radii, threshold: float, dt: float, accel_threshold: float = 0.5, length_scale: float = 1.0) -> dict:
    spatial = min_distance_matrix(trajs, radii)
    sync = closest_approach_matrix(trajs, radii)
    sup = support_distance_matrix(trajs, radii)
    centers = closest_approach_matrix(trajs, None)
    viol = proximity_violations(trajs, threshold, radii) if len(trajs) > 1 else []
    inc = inconsistency_samples(trajs, dt, accel_threshold, length_scale)
    return {
        "agents": [t.agent_id for t in trajs],
        "threshold": threshold,
        "min_distance": {
            "spatial_surface": spatial.tolist(),
            "synchronized_surface": sync.tolist(),
            "synchronized_center": centers.tolist(),
            "support_surface": sup.tolist(),
        },
        "global_min_synchronized": global_min(sync) if len(trajs) > 1 else None,
        "sub_threshold_pairs": [
            [trajs[i].agent_id, trajs[j].agent_id]
            for i, j in itertools.combinations(range(len(trajs)), 2)
            if sync[i, j] < threshold
        ],
        "violations": [
            {
                "agent": v.agent,
                "other": v.other,
                "interval": list(v.interval),
                "other_interval": list(v.other_interval),
                "min_distance": v.min_distance,
            }
            for v in viol
        ],
        "inconsistency": {
            "value": inc.fraction,
            "eligible_samples": inc.eligible,
            "exceeding_samples": inc.exceeding,
            "empty": inc.empty,
            "accel_threshold": accel_threshold,
            "range": length_scale,
        },
    }
