import numpy as np
import pytest
from scipy.spatial import cKDTree

from trustfg import metrics as M
from trustfg.gp import Trajectory
from trustfg.trust import AlignmentError


def densify(p, step=1e-3):
    """Points along polyline ``p`` no further than ``step`` apart, with their arc length."""
    p = np.asarray(p, dtype=float)
    pts, arcs, s0 = [p[:1]], [np.zeros(1)], 0.0
    for a, b in zip(p[:-1], p[1:]):
        seg = np.linalg.norm(b - a)
        k = max(1, int(np.ceil(seg / step)))
        t = np.linspace(0.0, 1.0, k + 1)[1:, None]
        pts.append(a + t * (b - a))
        arcs.append(s0 + t[:, 0] * seg)
        s0 += seg
    return np.vstack(pts), np.concatenate(arcs)


def dense_distance(p, q, step=1e-3):
    dp, _ = densify(p, step)
    dq, _ = densify(q, step)
    return float(cKDTree(dq).query(dp)[0].min())


def _traj(points, agent_id=0, dt=1.0):
    points = np.asarray(points, dtype=float)
    vel = np.gradient(points, dt, axis=0) if len(points) > 1 else np.zeros_like(points)
    return Trajectory.from_array(agent_id, dt, np.hstack([points, vel]))


def _random_polyline(rng, n=11):
    return np.cumsum(rng.normal(scale=0.4, size=(n, 2)), axis=0) + rng.uniform(-1, 1, 2)


# --- distances ----------------------------------------------------------------


def test_parallel_lines():
    p = [[0, 0], [1, 0], [2, 0]]
    q = [[0, 1], [2, 1]]
    assert M.polyline_distance(p, q) == 1.0
    assert M.segment_distance([0, 0], [1, 0], [0, 1], [1, 1]) == 1.0


def test_crossing_and_touching_lines():
    assert M.polyline_distance([[-1, 0], [1, 0]], [[0, -1], [0, 1]]) == 0.0
    assert M.polyline_distance([[-1, 0], [0, 0]], [[0, 0], [0, 1]]) == 0.0
    assert M.segment_distance([0, 0], [1, 1], [2, 2], [3, 3]) == pytest.approx(np.sqrt(2), abs=1e-15)


def test_point_cases():
    assert M.polyline_distance([[0, 0]], [[3, 4]]) == 5.0
    assert M.polyline_distance([[0, 1]], [[-1, 0], [1, 0]]) == 1.0
    assert M.point_segment_distance([2, 0], [0, 0], [0, 0]) == 2.0


def test_polyline_distance_matches_dense_oracle():
    rng = np.random.default_rng(11)
    for _ in range(50):
        p, q = _random_polyline(rng), _random_polyline(rng)
        exact = M.polyline_distance(p, q)
        oracle = dense_distance(p, q)
        assert abs(exact - oracle) <= 1e-3
        # sampled points can only overestimate the true minimum
        assert exact <= oracle + 1e-12


def test_distance_matrices_are_symmetric():
    rng = np.random.default_rng(3)
    trajs = [_traj(_random_polyline(rng), a) for a in range(4)]
    radii = {0: 0.1, 1: 0.2, 2: 0.1, 3: 0.05}
    for fn in (M.min_distance_matrix, M.closest_approach_matrix, M.support_distance_matrix):
        D = fn(trajs, radii)
        np.testing.assert_array_equal(D, D.T)
        np.testing.assert_array_equal(np.diag(D), 0.0)
        assert np.all(D >= 0)
    # the synchronized distance can never be smaller than the spatial one,
    # and never larger than the support-time distance
    S = M.min_distance_matrix(trajs, radii)
    C = M.closest_approach_matrix(trajs, radii)
    P = M.support_distance_matrix(trajs, radii)
    assert np.all(S <= C + 1e-12) and np.all(C <= P + 1e-12)


def test_radius_offset_and_clamp():
    a = _traj([[0, 0], [1, 0]])
    b = _traj([[0, 1], [1, 1]], 1)
    assert M.min_distance_matrix([a, b], 0.2)[0, 1] == pytest.approx(0.6)
    assert M.min_distance_matrix([a, b], 0.7)[0, 1] == 0.0


def test_synchronized_distance_matches_time_sampling():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p, q = _random_polyline(rng), _random_polyline(rng)
        got = M.closest_approach_matrix([_traj(p), _traj(q, 1)])[0, 1]
        t = np.linspace(0, len(p) - 1, 100001)
        idx = np.arange(len(p))
        pi = np.column_stack([np.interp(t, idx, p[:, k]) for k in range(2)])
        qi = np.column_stack([np.interp(t, idx, q[:, k]) for k in range(2)])
        oracle = np.linalg.norm(pi - qi, axis=1).min()
        assert got <= oracle + 1e-12 and oracle - got <= 1e-3


def test_crossing_paths_at_different_times_stay_apart():
    # both pass the origin, two seconds apart: a = (t - 2, 0), b = (0, 2 t)
    a = _traj([[x, 0.0] for x in np.linspace(-2, 2, 5)])
    b = _traj([[0.0, y] for y in np.linspace(0, 8, 5)], 1)
    assert M.min_distance_matrix([a, b])[0, 1] == 0.0
    # |a - b|^2 = (t - 2)^2 + 4 t^2 is smallest at t = 0.4
    assert M.closest_approach_matrix([a, b])[0, 1] == pytest.approx(np.sqrt(3.2), abs=1e-12)


def test_synchronized_needs_aligned_trajectories():
    with pytest.raises(AlignmentError):
        M.closest_approach_matrix([_traj([[0, 0], [1, 0]]), _traj([[0, 1], [1, 1], [2, 1]], 1)])


def test_global_min():
    assert M.global_min(np.zeros((1, 1))) == float("inf")
    assert M.global_min(np.array([[0, 3, 2], [3, 0, 1], [2, 1, 0]])) == 1.0


# --- violations -------------------------------------------------------------------


def test_no_violations_when_far():
    a = _traj([[0, 0], [5, 0]])
    b = _traj([[0, 3], [5, 3]], 1)
    assert M.proximity_violations([a, b], 0.5) == []


def test_crossing_gives_one_violation_per_agent():
    a = _traj([[-2, 0], [2, 0]])
    b = _traj([[0, -2], [0, 2]], 1)
    viol = M.proximity_violations([a, b], 0.3)
    assert sorted(v.agent for v in viol) == [0, 1]
    for v in viol:
        np.testing.assert_allclose(v.interval, [1.7, 2.3], atol=1e-12)
        assert v.min_distance == 0.0
    assert M.violation_length(viol, 0) == pytest.approx(0.6)
    with pytest.raises(ValueError):
        M.proximity_violations([a, b], 0.0)


def _oracle_runs(p, q, thr, step):
    pts, arcs = densify(p, step)
    dq, _ = densify(q, step / 4)
    near = cKDTree(dq).query(pts)[0] < thr
    runs, start = [], None
    for s, flag in zip(arcs, near):
        if flag and start is None:
            start = s
        if not flag and start is not None:
            runs.append((start, prev))
            start = None
        prev = s
    if start is not None:
        runs.append((start, arcs[-1]))
    return runs


def test_violations_match_sampling_oracle():
    rng = np.random.default_rng(21)
    step = 1e-3
    checked = 0
    for _ in range(40):
        p, q = _random_polyline(rng, 8), _random_polyline(rng, 8)
        viol = [v for v in M.proximity_violations([_traj(p), _traj(q, 1)], 0.25) if v.agent == 0]
        runs = _oracle_runs(p, q, 0.25, step)
        # runs shorter than a few samples can be lost by the sampling itself
        runs = [r for r in runs if r[1] - r[0] > 5 * step]
        viol_long = [v for v in viol if v.interval[1] - v.interval[0] > 10 * step]
        assert len(runs) >= len(viol_long)
        for lo, hi in runs:
            match = [v for v in viol if v.interval[0] - 2 * step <= lo and hi <= v.interval[1] + 2 * step]
            assert len(match) == 1
            v = match[0]
            if lo > step and hi < densify(p)[1][-1] - step:
                assert abs(v.interval[0] - lo) <= 2 * step and abs(v.interval[1] - hi) <= 2 * step
            checked += 1
    assert checked >= 10


def test_arc_slice():
    p = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    np.testing.assert_allclose(M.arc_slice(p, 0.5, 1.5), [[0.5, 0], [1, 0], [1, 0.5]])


# --- inconsistency ------------------------------------------------------------------


def test_inconsistency_three_of_ten():
    n = 11
    a = np.zeros((n, 4))
    a[:, 0] = np.arange(n) * 0.1
    a[:, 2] = 0.1
    b = a.copy()
    b[:, 1] = 0.5
    # velocity jumps make three steps of agent 1 accelerate by 1 m/s^2
    for k in (2, 5, 8):
        b[k + 1:, 3] += 1.0 if k != 5 else -1.0
    ta, tb = Trajectory.from_array(0, 1.0, a), Trajectory.from_array(1, 1.0, b)
    s = M.inconsistency_samples([ta, tb], 1.0, threshold=0.5, length_scale=1.0)
    assert (s.eligible, s.exceeding) == (10, 3) and s.fraction == 0.3
    assert M.inconsistency_metric([ta, ta], 1.0) == 0.0


def test_inconsistency_empty_when_far():
    a = _traj([[0, 0], [1, 0], [2, 0]])
    b = _traj([[0, 5], [1, 5], [2, 5]], 1)
    s = M.inconsistency_samples([a, b], 1.0)
    assert s.empty and s.fraction == 0.0
    with pytest.raises(ValueError):
        M.inconsistency_samples([a, b], 0.0)


def test_metrics_report_shape(joint_run, reference_cfg):
    rep = M.metrics_report(joint_run.trajectories, reference_cfg.radii, 0.1, reference_cfg.dt,
                           reference_cfg.accel_threshold)
    assert rep["agents"] == [0, 1, 2, 3]
    assert rep["global_min_synchronized"] >= 0.095
    assert rep["sub_threshold_pairs"] == []
    assert 0.0 <= rep["inconsistency"]["value"] <= 1.0
