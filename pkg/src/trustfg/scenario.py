"""Multi-agent scenarios: configuration, joint graph assembly and the two run modes.

``run_joint`` solves every agent's trajectory in one factor graph.
``run_decentralized`` lets each agent re-solve its own trajectory against the
latest trajectories broadcast by the others, round after round, until the
broadcast set stops changing.
"""

from __future__ import annotations

import copy
import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .gp import GPPriorParams, Trajectory, make_gp_prior_factors
from .graph import FactorGraph, StateVariable, VarKey, total_cost
from .solver import SolverConfig, SolverError, SolveResult, solve
from .trust import (
    TransparencyReport,
    TrustParams,
    compute_discrepancy,
    make_consistency_factors,
    make_proximity_factors,
    transparency_thresholds,
    trust_scores,
)
from .world import GridSDF, OccupancyGrid, RobotShape, WorldError, build_sdf, load_grid, make_obstacle_factors

logger = logging.getLogger(__name__)

FACTOR_TOGGLES = ("gp", "obstacle", "proximity", "consistency", "transparency")
TRUST_TOGGLES = ("proximity", "consistency", "transparency")
MODES = ("joint", "decentralized")

CONSENSUS_TOL = 1e-4
CONSENSUS_MAX_ROUNDS = 50


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class ScenarioError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentSpec:
    agent_id: int
    start: np.ndarray  # (x, y, vx, vy)
    goal: np.ndarray
    radius: float = 0.1


@dataclass(frozen=True)
class MisinfoSpec:
    agent_id: int
    fraction: float
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        if not self.magnitude > 0:
            raise ValueError("magnitude must be positive")


@dataclass
class ScenarioConfig:
    world: OccupancyGrid
    agents: list
    steps: int = 30
    dt: float = 0.2
    gp: GPPriorParams = field(default_factory=GPPriorParams)
    obstacle_eps: float = 0.1
    obstacle_sigma: float = 0.02
    trust: TrustParams = field(default_factory=TrustParams)
    factors: dict = field(default_factory=lambda: {k: True for k in FACTOR_TOGGLES})
    misinfo: list = field(default_factory=list)
    mode: str = "joint"
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    consistency_passes: int = 2
    accel_threshold: float = 0.5
    name: str = "scenario"

    @property
    def agent_ids(self) -> list:
        return [a.agent_id for a in self.agents]

    @property
    def radii(self) -> dict:
        return {a.agent_id: a.radius for a in self.agents}

    def enabled(self, kind: str) -> bool:
        return bool(self.factors.get(kind, True))

    def with_disabled(self, *kinds: str) -> "ScenarioConfig":
        factors = dict(self.factors)
        for k in kinds:
            if k not in FACTOR_TOGGLES:
                raise ConfigError("factors", f"unknown factor kind {k!r}")
            factors[k] = False
        return replace(self, factors=factors)


_TOP_KEYS = {
    "name", "world", "agents", "steps", "dt", "gp", "obstacle", "factors", "trust_params",
    "misinfo", "mode", "seed", "solver", "consistency_passes", "accel_threshold",
}


def _reject_unknown(obj: dict, allowed, path: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(path, "expected an object")
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}" if path else extra[0], "unknown key")


def _number(obj, key, path, default=None, positive=False):
    where = f"{path}.{key}" if path else key
    if key not in obj:
        if default is None:
            raise ConfigError(where, "missing required value")
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(where, f"expected a finite number, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(where, "must be positive")
    return float(v)


def _vector(v, n, path):
    if not isinstance(v, list) or len(v) != n or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ConfigError(path, f"expected a list of {n} numbers")
    return np.array(v, dtype=float)


def _parse_world(obj, base_dir: Path, path="world") -> OccupancyGrid:
    if not isinstance(obj, dict):
        raise ConfigError(path, "expected an object")
    try:
        if "grid_file" in obj:
            _reject_unknown(obj, {"grid_file"}, path)
            return load_grid(base_dir / obj["grid_file"])
        _reject_unknown(obj, {"width", "height", "cell_size", "origin", "obstacles"}, path)
        width = _number(obj, "width", path, positive=True)
        height = _number(obj, "height", path, positive=True)
        cell = _number(obj, "cell_size", path, positive=True)
        origin = _vector(obj.get("origin", [0.0, 0.0]), 2, f"{path}.origin")
        rects = []
        for i, r in enumerate(obj.get("obstacles", [])):
            rects.append(_vector(r, 4, f"{path}.obstacles[{i}]"))
        return OccupancyGrid.from_rectangles(width, height, cell, origin, rects)
    except (WorldError, OSError) as exc:
        raise ConfigError(path, str(exc)) from None


def _parse_state(v, path) -> np.ndarray:
    if isinstance(v, list) and len(v) == 2:
        v = [*v, 0.0, 0.0]
    return _vector(v, 4, path)


def config_from_dict(data: dict, base_dir=".") -> ScenarioConfig:
    """Validate a JSON-compatible scenario description."""
    base_dir = Path(base_dir)
    _reject_unknown(data, _TOP_KEYS, "")
    if "world" not in data:
        raise ConfigError("world", "missing required value")
    world = _parse_world(data["world"], base_dir)

    agents_raw = data.get("agents")
    if not isinstance(agents_raw, list) or not agents_raw:
        raise ConfigError("agents", "expected a non-empty list")
    agents = []
    for i, a in enumerate(agents_raw):
        p = f"agents[{i}]"
        _reject_unknown(a, {"id", "start", "goal", "radius"}, p)
        if "id" not in a or isinstance(a["id"], bool) or not isinstance(a["id"], int):
            raise ConfigError(f"{p}.id", "expected an integer")
        start = _parse_state(a.get("start"), f"{p}.start")
        goal = _parse_state(a.get("goal"), f"{p}.goal")
        radius = _number(a, "radius", p, default=0.1, positive=True)
        for label, s in (("start", start), ("goal", goal)):
            if not world.contains(s[:2]):
                raise ConfigError(f"{p}.{label}", "position lies outside the world")
        agents.append(AgentSpec(a["id"], start, goal, radius))
    ids = [a.agent_id for a in agents]
    if len(set(ids)) != len(ids):
        raise ConfigError("agents", "agent ids must be unique")

    steps = data.get("steps", 30)
    if isinstance(steps, bool) or not isinstance(steps, int) or steps < 2:
        raise ConfigError("steps", "expected an integer >= 2")
    dt = _number(data, "dt", "", default=0.2, positive=True)

    gp_raw = data.get("gp", {})
    _reject_unknown(gp_raw, {"qc", "anchor_pos_sigma", "anchor_vel_sigma"}, "gp")
    d = GPPriorParams()
    gp = GPPriorParams(
        qc=_number(gp_raw, "qc", "gp", d.qc, True),
        anchor_pos_sigma=_number(gp_raw, "anchor_pos_sigma", "gp", d.anchor_pos_sigma, True),
        anchor_vel_sigma=_number(gp_raw, "anchor_vel_sigma", "gp", d.anchor_vel_sigma, True),
    )

    obs_raw = data.get("obstacle", {})
    _reject_unknown(obs_raw, {"eps", "sigma"}, "obstacle")
    obstacle_eps = _number(obs_raw, "eps", "obstacle", 0.1, True)
    obstacle_sigma = _number(obs_raw, "sigma", "obstacle", ScenarioConfig.obstacle_sigma, True)

    tp_raw = data.get("trust_params", {})
    _reject_unknown(tp_raw, TrustParams.__dataclass_fields__.keys(), "trust_params")
    td = TrustParams()
    trust = TrustParams(**{
        k: _number(tp_raw, k, "trust_params", getattr(td, k), True) for k in TrustParams.__dataclass_fields__
    })

    fac_raw = data.get("factors", {})
    _reject_unknown(fac_raw, FACTOR_TOGGLES, "factors")
    factors = {}
    for k in FACTOR_TOGGLES:
        v = fac_raw.get(k, True)
        if not isinstance(v, bool):
            raise ConfigError(f"factors.{k}", "expected true or false")
        factors[k] = v

    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", "expected a non-negative integer")

    misinfo = []
    mis_raw = data.get("misinfo", [])
    if not isinstance(mis_raw, list):
        raise ConfigError("misinfo", "expected a list")
    for i, m in enumerate(mis_raw):
        p = f"misinfo[{i}]"
        _reject_unknown(m, {"agent_id", "fraction", "magnitude", "seed"}, p)
        if m.get("agent_id") not in ids:
            raise ConfigError(f"{p}.agent_id", "does not name a configured agent")
        try:
            misinfo.append(MisinfoSpec(
                m["agent_id"],
                _number(m, "fraction", p),
                _number(m, "magnitude", p),
                int(m.get("seed", i)),
            ))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(p, str(exc)) from None

    mode = data.get("mode", "joint")
    if mode not in MODES:
        raise ConfigError("mode", f"expected one of {', '.join(MODES)}")

    sol_raw = data.get("solver", {})
    _reject_unknown(sol_raw, SolverConfig.__dataclass_fields__.keys(), "solver")
    try:
        solver = SolverConfig(**sol_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError("solver", str(exc)) from None

    passes = data.get("consistency_passes", 2)
    if isinstance(passes, bool) or not isinstance(passes, int) or passes < 1:
        raise ConfigError("consistency_passes", "expected an integer >= 1")

    return ScenarioConfig(
        world=world, agents=agents, steps=steps, dt=dt, gp=gp,
        obstacle_eps=obstacle_eps, obstacle_sigma=obstacle_sigma, trust=trust,
        factors=factors, misinfo=misinfo, mode=mode, seed=seed, solver=solver,
        consistency_passes=passes,
        accel_threshold=_number(data, "accel_threshold", "", 0.5, True),
        name=str(data.get("name", "scenario")),
    )


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read scenario: {exc.strerror or exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from None
    return config_from_dict(data, path.parent)


def builtin_scenario_path(name: str = "reference") -> Path:
    return Path(str(resources.files("trustfg") / "scenarios" / f"{name}.json"))


def reference_scenario(**overrides) -> ScenarioConfig:
    """The four-car unsignalized intersection."""
    cfg = load_config(builtin_scenario_path("reference"))
    return replace(cfg, **overrides) if overrides else cfg


# --- trajectories ----------------------------------------------------------


def straight_line_init(start, goal, n: int, dt: float, agent_id: int = 0) -> Trajectory:
    """Constant-velocity line from ``start`` to ``goal`` positions."""
    if n < 2:
        raise ValueError("need at least two steps")
    p0 = np.asarray(start, dtype=float)[:2]
    p1 = np.asarray(goal, dtype=float)[:2]
    v = (p1 - p0) / ((n - 1) * dt)
    s = np.linspace(0.0, 1.0, n)[:, None]
    pos = p0 + s * (p1 - p0)
    return Trajectory(agent_id, dt, [StateVariable(p, v) for p in pos])


def initial_trajectories(cfg: ScenarioConfig) -> list:
    return [straight_line_init(a.start, a.goal, cfg.steps, cfg.dt, a.agent_id) for a in cfg.agents]


def inject_misinformation(traj: Trajectory, spec: MisinfoSpec, base_seed: int | None = None) -> Trajectory:
    """Copy of ``traj`` with a seeded subset of positions displaced by ``magnitude``.

    ``ceil(fraction * N)`` distinct steps are chosen; each is moved by
    ``magnitude`` in a uniformly random direction.
    """
    n = len(traj)
    count = min(n, math.ceil(spec.fraction * n - 1e-9))
    pos = traj.positions.copy()
    if count > 0:
        rng = np.random.default_rng(spec.seed if base_seed is None else [base_seed, spec.seed])
        idx = np.sort(rng.choice(n, size=count, replace=False))
        angle = rng.uniform(0.0, 2.0 * math.pi, size=count)
        pos[idx] += spec.magnitude * np.column_stack([np.cos(angle), np.sin(angle)])
    return Trajectory(traj.agent_id, traj.dt, [StateVariable(p, s.velocity) for p, s in zip(pos, traj.states)])


def shared_copy(traj: Trajectory, cfg: ScenarioConfig) -> Trajectory:
    out = traj
    for spec in cfg.misinfo:
        if spec.agent_id == traj.agent_id:
            out = inject_misinformation(out, spec, cfg.seed)
    return out


def transparency_report(cfg: ScenarioConfig, trajs) -> TransparencyReport:
    """Discrepancy of each agent's shared copy against its observed trajectory,
    and the resulting per-pair proximity margins."""
    ids = cfg.agent_ids
    if cfg.enabled("transparency"):
        disc = {
            t.agent_id: compute_discrepancy(shared_copy(t, cfg), t.positions, cfg.trust.transparency_tol)
            for t in trajs
        }
        thresholds = transparency_thresholds(ids, disc, cfg.trust)
    else:
        disc = {a: 0.0 for a in ids}
        thresholds = {(a, b): cfg.trust.eps_proximity for a, b in itertools.combinations(sorted(ids), 2)}
    return TransparencyReport(discrepancy=disc, thresholds=thresholds)


# --- graph assembly --------------------------------------------------------


def _sdf_for(cfg: ScenarioConfig) -> GridSDF:
    # grids are immutable, so the field is cached on the grid itself
    sdf = cfg.world.__dict__.get("_sdf")
    if sdf is None:
        sdf = build_sdf(cfg.world)
        object.__setattr__(cfg.world, "_sdf", sdf)
    return sdf


def agent_factors(cfg: ScenarioConfig, traj: Trajectory, sdf: GridSDF) -> list:
    spec = next(a for a in cfg.agents if a.agent_id == traj.agent_id)
    out = []
    if cfg.enabled("gp"):
        out.extend(make_gp_prior_factors(traj, cfg.gp, start=spec.start, goal=spec.goal))
    if cfg.enabled("obstacle"):
        out.extend(make_obstacle_factors(traj, sdf, RobotShape(spec.radius), cfg.obstacle_eps, cfg.obstacle_sigma))
    return out


def build_joint_graph(cfg: ScenarioConfig, trajs=None, thresholds=None, weights_from=None) -> FactorGraph:
    """Every agent's prior and obstacle factors plus the enabled pairwise trust factors.

    ``trajs`` supplies the variable values and, unless ``weights_from`` is
    given, the pair distances behind the consistency weights.  It defaults
    to straight-line initialization.
    """
    trajs = trajs if trajs is not None else initial_trajectories(cfg)
    sdf = _sdf_for(cfg)
    graph = FactorGraph()
    for t in trajs:
        for k, v in t.assignment().items():
            graph.add_variable(k, v)
        graph.extend(agent_factors(cfg, t, sdf))
    if len(trajs) > 1:
        if cfg.enabled("proximity"):
            graph.extend(make_proximity_factors(trajs, cfg.trust, cfg.radii, thresholds))
        if cfg.enabled("consistency"):
            graph.extend(make_consistency_factors(trajs, cfg.trust, weights_from))
    return graph


def expected_factor_count(cfg: ScenarioConfig) -> int:
    m, n = len(cfg.agents), cfg.steps
    per_agent = (n - 1 + 2 if cfg.enabled("gp") else 0) + (n if cfg.enabled("obstacle") else 0)
    pairs = m * (m - 1) // 2
    per_pair = (n if cfg.enabled("proximity") else 0) + (n - 1 if cfg.enabled("consistency") else 0)
    return m * per_agent + pairs * per_pair


def _theta(trajs) -> dict:
    theta = {}
    for t in trajs:
        theta.update(t.assignment())
    return theta


def _unpack(cfg: ScenarioConfig, theta) -> list:
    return [Trajectory.from_assignment(a.agent_id, cfg.dt, cfg.steps, theta) for a in cfg.agents]


@dataclass
class RunResult:
    trajectories: list
    report: TransparencyReport
    solve: SolveResult | None
    converged: bool
    rounds: int = 0
    round_costs: list = field(default_factory=list)
    total_cost: float = 0.0

    def __iter__(self):
        yield self.trajectories
        yield self.report
        yield self.solve if self.rounds == 0 else self.rounds


def _solve(cfg, graph, theta, fixed=()):
    try:
        return solve(graph, theta, cfg.solver, "lm", fixed)
    except SolverError as exc:
        raise ScenarioError(f"scenario {cfg.name!r}: {exc}") from exc


def run_joint(cfg: ScenarioConfig) -> RunResult:
    """Transparency preprocessing, then a Levenberg-Marquardt solve of the joint graph."""
    trajs = initial_trajectories(cfg)
    report = transparency_report(cfg, trajs)
    passes = cfg.consistency_passes if cfg.enabled("consistency") and len(trajs) > 1 else 1
    result = None
    iterations = 0
    history: list = []
    converged = True
    for _ in range(passes):
        graph = build_joint_graph(cfg, trajs, report.thresholds)
        result = _solve(cfg, graph, _theta(trajs))
        iterations += result.iterations
        history.extend(result.cost_history if not history else result.cost_history[1:])
        converged = result.converged
        trajs = _unpack(cfg, result.solution)
    result = SolveResult(result.solution, history, converged, iterations)
    report.trust_scores = trust_scores(trajs, cfg.radii, report.discrepancy, cfg.trust)
    final = total_cost(build_joint_graph(cfg, trajs, report.thresholds), _theta(trajs))
    return RunResult(trajs, report, result, converged, 0, [], final)


def run_decentralized(cfg: ScenarioConfig) -> RunResult:
    """Round-based best response.

    Each round every agent, in id order, re-solves its own trajectory holding
    the latest broadcast of the others fixed, then broadcasts a (possibly
    misinformed) copy.  Stops once no trajectory moves more than
    ``CONSENSUS_TOL`` metres in a round, or after ``CONSENSUS_MAX_ROUNDS``.

    Consistency weights are taken from the broadcast set at the start of each
    of the first ``cfg.consistency_passes`` rounds and then frozen, so later
    rounds descend a fixed joint objective.
    """
    own = {t.agent_id: t for t in initial_trajectories(cfg)}
    report = transparency_report(cfg, list(own.values()))
    broadcast = {a: shared_copy(t, cfg) for a, t in own.items()}
    sdf = _sdf_for(cfg)
    ids = cfg.agent_ids
    n = cfg.steps

    weight_source = [broadcast[a] for a in ids]

    def joint_cost(trajs_by_id) -> float:
        trajs = [trajs_by_id[a] for a in ids]
        return total_cost(build_joint_graph(cfg, trajs, report.thresholds, weight_source), _theta(trajs))

    round_costs = [joint_cost(broadcast)]
    converged = False
    rounds = 0
    last_solve = None
    while rounds < CONSENSUS_MAX_ROUNDS:
        rounds += 1
        if rounds <= cfg.consistency_passes:
            weight_source = [broadcast[a] for a in ids]
        change = 0.0
        for a in ids:
            view = [own[a] if b == a else broadcast[b] for b in ids]
            graph = FactorGraph()
            for t in view:
                for k, v in t.assignment().items():
                    graph.add_variable(k, v)
            graph.extend(agent_factors(cfg, own[a], sdf))
            if len(view) > 1:
                pair_factors = []
                if cfg.enabled("proximity"):
                    pair_factors += make_proximity_factors(view, cfg.trust, cfg.radii, report.thresholds)
                if cfg.enabled("consistency"):
                    pair_factors += make_consistency_factors(view, cfg.trust, weight_source)
                graph.extend(f for f in pair_factors if any(k.agent_id == a for k in f.keys))
            fixed = [VarKey(b, k) for b in ids if b != a for k in range(n)]
            last_solve = _solve(cfg, graph, _theta(view), fixed)
            updated = Trajectory.from_assignment(a, cfg.dt, n, last_solve.solution)
            change = max(change, float(np.max(np.linalg.norm(updated.positions - own[a].positions, axis=1))))
            own[a] = updated
            broadcast[a] = shared_copy(updated, cfg)
        round_costs.append(joint_cost(broadcast))
        logger.debug("round %d: max change %.3g m, cost %.6g", rounds, change, round_costs[-1])
        if change < CONSENSUS_TOL:
            converged = True
            break
    if not converged:
        logger.warning("decentralized consensus did not settle within %d rounds", CONSENSUS_MAX_ROUNDS)
    trajs = [own[a] for a in ids]
    report.trust_scores = trust_scores(trajs, cfg.radii, report.discrepancy, cfg.trust)
    final = total_cost(build_joint_graph(cfg, trajs, report.thresholds), _theta(trajs))
    return RunResult(trajs, report, last_solve, converged, rounds, round_costs, final)


def run(cfg: ScenarioConfig) -> RunResult:
    return run_decentralized(cfg) if cfg.mode == "decentralized" else run_joint(cfg)


def config_to_dict(cfg: ScenarioConfig) -> dict:
    """Inline JSON-compatible form (world as rasterized rows are not preserved; used for reports)."""
    return {
        "name": cfg.name,
        "steps": cfg.steps,
        "dt": cfg.dt,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "factors": dict(cfg.factors),
        "agents": [
            {"id": a.agent_id, "start": a.start.tolist(), "goal": a.goal.tolist(), "radius": a.radius}
            for a in cfg.agents
        ],
        "misinfo": [copy.copy(m.__dict__) for m in cfg.misinfo],
    }
