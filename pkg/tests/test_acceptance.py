"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with the measured value.
The module can also be run directly (``python tests/test_acceptance.py``)
to print the summary without pytest.
"""

import functools
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from test_graph import _near_kink, _random_factor, _sdf, _states  # noqa: E402
from test_metrics import dense_distance  # noqa: E402
from test_world import brute_force_sdf  # noqa: E402

from conftest import finite_difference  # noqa: E402
from trustfg import metrics as M  # noqa: E402
from trustfg.cli import main as cli_main  # noqa: E402
from trustfg.gp import GPPriorParams, Trajectory, make_gp_prior_factors  # noqa: E402
from trustfg.graph import FACTOR_KINDS, AffineFactor, FactorGraph, StateVariable, VarKey, linearize  # noqa: E402
from trustfg.scenario import (  # noqa: E402
    CONSENSUS_MAX_ROUNDS,
    builtin_scenario_path,
    load_config,
    reference_scenario,
    run,
)
from trustfg.solver import gauss_newton  # noqa: E402
from trustfg.world import OccupancyGrid, build_sdf  # noqa: E402

TRUST_KINDS = ("proximity", "consistency", "transparency")


@functools.lru_cache(maxsize=None)
def timed_run(mode="joint", disabled=(), scenario="reference", steps=None):
    cfg = load_config(builtin_scenario_path(scenario)).with_disabled(*disabled)
    cfg = replace(cfg, mode=mode, steps=steps or cfg.steps)
    t0 = time.perf_counter()
    result = run(cfg)
    return cfg, result, time.perf_counter() - t0


def sync_min(cfg, result):
    return M.global_min(M.closest_approach_matrix(result.trajectories, cfg.radii))


# --- criteria -------------------------------------------------------------------
# each returns (passed, detail)


def criterion_1():
    t0 = time.perf_counter()
    sdf = _sdf()
    worst = worst_abs = 0.0
    for kind in FACTOR_KINDS:
        rng = np.random.default_rng(100 + FACTOR_KINDS.index(kind))
        checked = 0
        while checked < 100:
            factor, n_keys = _random_factor(kind, rng, sdf)
            xs = _states(kind, rng, n_keys)
            if _near_kink(factor, xs):
                continue
            for j, J in enumerate(factor.jacobians(xs)):
                def r_of(x, j=j):
                    ys = list(xs)
                    ys[j] = x
                    return factor.residual(ys)

                fd = finite_difference(r_of, xs[j])
                err = np.abs(J - fd)
                scale = np.maximum(np.abs(J), np.abs(fd))
                # relative error, with an absolute floor for entries that vanish
                rel = np.where(err <= 1e-8, 0.0, err / np.where(scale > 0, scale, 1.0))
                worst = max(worst, float(rel.max()))
                worst_abs = max(worst_abs, float(err.max()))
            checked += 1
    elapsed = time.perf_counter() - t0
    return worst <= 1e-5 and elapsed < 10.0, (f"600 states, worst rel error {worst:.1e} (abs floor 1e-8), "
                                                 f"worst abs error {worst_abs:.1e}, {elapsed:.2f} s")


def criterion_2():
    rng = np.random.default_rng(2)
    worst_grad, iters = 0.0, set()
    for _ in range(10):
        keys = [VarKey(a, 0) for a in range(6)]
        g = FactorGraph()
        for k in keys:
            g.add_variable(k, rng.normal(size=4))
            # one square block per key keeps the problem well posed
            g.add(AffineFactor([k], [rng.normal(size=(4, 4)) + 3 * np.eye(4)], rng.normal(size=4)))
        for _ in range(15):
            chosen = rng.choice(6, size=2, replace=False)
            g.add(AffineFactor([keys[j] for j in chosen], [rng.normal(size=(3, 4)) for _ in chosen],
                               rng.normal(size=3)))
        res = gauss_newton(g, g.initial_values())
        sys_ = linearize(g, res.solution)
        worst_grad = max(worst_grad, float(np.linalg.norm(sys_.A.T @ sys_.b)))
        iters.add(res.iterations)
    ok = iters == {1} and worst_grad <= 1e-10
    return ok, f"iterations {sorted(iters)}, max gradient norm {worst_grad:.1e}"


def criterion_3():
    n, dt = 25, 0.2
    p0, v = np.array([-1.0, 0.5]), np.array([0.6, -0.25])
    truth = Trajectory(0, dt, [StateVariable(p0 + k * dt * v, v) for k in range(n)])
    rng = np.random.default_rng(3)
    g = FactorGraph()
    for k, x in truth.assignment().items():
        g.add_variable(k, x + rng.normal(scale=0.5, size=4))
    g.extend(make_gp_prior_factors(truth, GPPriorParams()))
    res = gauss_newton(g, g.initial_values())
    got = Trajectory.from_assignment(0, dt, n, res.solution)
    err = float(np.abs(got.positions - truth.positions).max())
    return err <= 1e-9, f"max position error {err:.1e} m"


def criterion_4():
    cfg, result, elapsed = timed_run()
    d = sync_min(cfg, result)
    return d >= 0.095 and elapsed < 60.0, f"min pairwise surface distance {d:.4f} m, {elapsed:.2f} s"


def criterion_5():
    cfg, result, _ = timed_run(disabled=TRUST_KINDS)
    d = sync_min(cfg, result)
    return d < 0.1, f"min pairwise surface distance with trust off {d:.4f} m"


def criterion_6():
    values = []
    for disabled in ((), ("consistency",)):
        cfg, result, _ = timed_run(disabled=disabled)
        values.append(M.inconsistency_metric(result.trajectories, cfg.dt, cfg.accel_threshold,
                                             cfg.trust.consistency_range))
    on, off = values
    return on <= 0.9 * off, f"inconsistency on {on:.3f}, off {off:.3f}, ratio {on / off:.2f}"


def criterion_7():
    dists = []
    for disabled in ((), ("transparency",)):
        cfg, result, _ = timed_run(disabled=disabled, scenario="reference_misinfo")
        (liar,) = {m.agent_id for m in cfg.misinfo}
        sync = M.closest_approach_matrix(result.trajectories, cfg.radii)
        i = cfg.agent_ids.index(liar)
        dists.append(min(sync[i, j] for j in range(len(cfg.agents)) if j != i))
    ratio = dists[0] / dists[1]
    return ratio >= 1.3, f"distance to misinforming agent {dists[0]:.4f} vs {dists[1]:.4f} m, ratio {ratio:.2f}"


def criterion_8():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        p = np.cumsum(rng.normal(scale=0.4, size=(11, 2)), axis=0)
        q = np.cumsum(rng.normal(scale=0.4, size=(11, 2)), axis=0) + rng.uniform(-1, 1, 2)
        worst = max(worst, abs(M.polyline_distance(p, q) - dense_distance(p, q)))
    sdf_ok = True
    for shape, density in (((64, 64), 0.1), ((64, 64), 0.5), ((40, 64), 0.3), ((7, 3), 0.4)):
        cells = rng.random(shape) < density
        cells[0, 0] = False
        cells[-1, -1] = True
        sdf = build_sdf(OccupancyGrid((0.0, 0.0), 0.05, cells))
        sdf_ok &= bool(np.array_equal(sdf.distances, brute_force_sdf(cells, 0.05)))
    return worst <= 1e-3 and sdf_ok, f"max polyline error {worst:.1e} m, sdf exact {sdf_ok}"


def criterion_9():
    cfg, joint, _ = timed_run()
    _, dec, elapsed = timed_run(mode="decentralized")
    ratio = dec.total_cost / joint.total_cost
    d_joint, d_dec = sync_min(cfg, joint), sync_min(cfg, dec)
    ok = dec.converged and dec.rounds <= CONSENSUS_MAX_ROUNDS and ratio <= 1.15 and min(d_joint, d_dec) >= 0.095
    return ok, (f"{dec.rounds} rounds, cost ratio {ratio:.4f}, min distance joint {d_joint:.4f} "
                f"decentralized {d_dec:.4f} m, {elapsed:.2f} s")


def criterion_10():
    outputs = []
    with tempfile.TemporaryDirectory() as tmp:
        for k in range(2):
            out = Path(tmp) / str(k)
            cli_main(["simulate", "--scenario", "reference", "--out", str(out)])
            outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    identical = outputs[0] == outputs[1] and len(outputs[0]) == 4

    cfg = reference_scenario(steps=50)
    t0 = time.perf_counter()
    result = run(cfg)
    elapsed = time.perf_counter() - t0
    unknowns = sum(t.as_array().size for t in result.trajectories)

    from trustfg.scenario import build_joint_graph

    graph = build_joint_graph(cfg)
    sys_ = linearize(graph, graph.initial_values())
    A = sys_.A.tocsr()
    stored = set(zip(np.repeat(np.arange(A.shape[0]), np.diff(A.indptr)).tolist(), A.indices.tolist()))
    adjacency = set()
    for _, rows, keys in sys_.row_blocks:
        cols = [c for k in keys for c in range(*sys_.column_slice(k).indices(sys_.n_columns))]
        adjacency.update((r, c) for r in range(rows.start, rows.stop) for c in cols)
    pattern = stored == adjacency
    ok = identical and elapsed < 5.0 and unknowns == 800 and pattern
    return ok, (f"byte-identical {identical}, {unknowns} unknowns solved in {elapsed:.2f} s, "
                f"sparsity equals adjacency {pattern}")


CRITERIA = [
    (1, "Jacobian suite", criterion_1),
    (2, "linear exactness", criterion_2),
    (3, "GP prior-only MAP", criterion_3),
    (4, "intersection safety", criterion_4),
    (5, "safety ablation", criterion_5),
    (6, "consistency ablation", criterion_6),
    (7, "transparency effect", criterion_7),
    (8, "oracle equivalence", criterion_8),
    (9, "consensus agreement", criterion_9),
    (10, "determinism and performance", criterion_10),
]


def _line(number, name, ok, detail):
    return f"{'PASS' if ok else 'FAIL'} criterion {number} ({name}): {detail}"


@pytest.mark.parametrize("number, name, fn", CRITERIA, ids=[f"criterion_{n}" for n, _, _ in CRITERIA])
def test_criterion(number, name, fn, capsys):
    ok, detail = fn()
    with capsys.disabled():
        print("\n" + _line(number, name, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for number, name, fn in CRITERIA:
        ok, detail = fn()
        failed += not ok
        print(_line(number, name, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
