"""Command-line front end.

    trustfg simulate --scenario intersection.json --out results/
    trustfg ablate --scenario intersection.json --out results/ --mode joint

``--scenario`` also accepts the name of a bundled scenario (``reference``,
``reference_misinfo``).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from . import metrics as M
from .io import render_svg, trajectories_to_csv, atomic_write, write_json
from .scenario import (
    FACTOR_TOGGLES,
    MODES,
    ConfigError,
    MisinfoSpec,
    ScenarioConfig,
    ScenarioError,
    builtin_scenario_path,
    load_config,
    run,
)

logger = logging.getLogger("trustfg")

EXIT_OK, EXIT_CONFIG, EXIT_NOT_CONVERGED = 0, 1, 2

# (name, disabled kinds, with misinformation); transparency is judged on a
# misinformed scenario, so its baseline is an all-on run with the same lies
ABLATIONS = (
    ("all-on", (), False),
    ("proximity-off", ("proximity",), False),
    ("consistency-off", ("consistency",), False),
    ("transparency-off", ("transparency",), True),
    ("all-on-misinfo", (), True),
)


@dataclass
class RunManifest:
    scenario: Path
    out: Path
    disabled: tuple = ()
    mode: str | None = None
    seed: int | None = None

    def __post_init__(self):
        bad = [k for k in self.disabled if k not in FACTOR_TOGGLES]
        if bad:
            raise ConfigError("--disable", f"unknown factor kind {bad[0]!r}")


def _resolve_scenario(path) -> Path:
    p = Path(path)
    if not p.exists() and p.suffix == "" and builtin_scenario_path(p.name).exists():
        return builtin_scenario_path(p.name)
    return p


def load_manifest_config(manifest: RunManifest) -> ScenarioConfig:
    cfg = load_config(_resolve_scenario(manifest.scenario))
    if manifest.disabled:
        cfg = cfg.with_disabled(*manifest.disabled)
    if manifest.mode is not None:
        cfg = replace(cfg, mode=manifest.mode)
    if manifest.seed is not None:
        cfg = replace(cfg, seed=manifest.seed)
    return cfg


def _prepare_out(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError("--out", f"cannot create output directory: {exc.strerror or exc}") from None


def _solver_diagnostics(result) -> dict:
    diag = {"converged": result.converged, "total_cost": result.total_cost}
    if result.rounds:
        diag["rounds"] = result.rounds
        diag["round_costs"] = result.round_costs
    if result.solve is not None:
        diag["iterations"] = result.solve.iterations
        diag["cost_history"] = result.solve.cost_history
    return diag


def _run_metrics(cfg: ScenarioConfig, result) -> dict:
    report = M.metrics_report(
        result.trajectories, cfg.radii, cfg.trust.eps_proximity, cfg.dt,
        cfg.accel_threshold, cfg.trust.consistency_range,
    )
    report["trust_scores"] = {str(k): v for k, v in sorted(result.report.trust_scores.items())}
    report["solver"] = _solver_diagnostics(result)
    report["scenario"] = {
        "name": cfg.name,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "factors": dict(cfg.factors),
    }
    return report


def cmd_simulate(manifest: RunManifest) -> int:
    try:
        cfg = load_manifest_config(manifest)
        result = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioError as exc:
        print(f"solve failed: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    try:
        _prepare_out(manifest.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = manifest.out
    metrics = _run_metrics(cfg, result)
    violations = M.proximity_violations(result.trajectories, cfg.trust.eps_proximity, cfg.radii)
    atomic_write(out / "trajectories.csv", trajectories_to_csv(result.trajectories))
    write_json(out / "metrics.json", metrics)
    atomic_write(out / "plot.svg", render_svg(cfg.world, result.trajectories, violations, cfg.radii))
    trust = result.report.to_json()
    trust["misinfo"] = [m.__dict__ for m in cfg.misinfo]
    write_json(out / "trust_report.json", trust)
    if not result.converged:
        print("warning: solver did not converge", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _distance_to(matrix, trajs, agent_id: int) -> float:
    ids = [t.agent_id for t in trajs]
    i = ids.index(agent_id)
    return float(min(matrix[i, j] for j in range(len(ids)) if j != i))


def cmd_ablate(manifest: RunManifest) -> int:
    try:
        base = load_manifest_config(manifest)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    misinformed = base if base.misinfo else replace(
        # the transparency comparison needs someone to misinform
        base, misinfo=[MisinfoSpec(base.agent_ids[0], 0.4, 0.3, 0)]
    )
    clean = replace(base, misinfo=[])
    liars = sorted({m.agent_id for m in misinformed.misinfo})
    runs = {}
    converged = True
    for name, off, lying in ABLATIONS:
        cfg = misinformed if lying else clean
        cfg = cfg.with_disabled(*off) if off else cfg
        try:
            result = run(cfg)
        except ScenarioError as exc:
            print(f"solve failed in run {name!r}: {exc}", file=sys.stderr)
            return EXIT_NOT_CONVERGED
        converged &= result.converged
        trajs = result.trajectories
        sync = M.closest_approach_matrix(trajs, cfg.radii)
        inc = M.inconsistency_samples(trajs, cfg.dt, cfg.accel_threshold, cfg.trust.consistency_range)
        runs[name] = {
            "disabled": [k for k in FACTOR_TOGGLES if not cfg.enabled(k)],
            "misinfo": [m.__dict__ for m in cfg.misinfo],
            "converged": result.converged,
            "total_cost": result.total_cost,
            "min_distance": {
                "synchronized_surface": sync.tolist(),
                "spatial_surface": M.min_distance_matrix(trajs, cfg.radii).tolist(),
            },
            "global_min_synchronized": M.global_min(sync),
            "inconsistency": inc.fraction,
            "inconsistency_samples": {"eligible": inc.eligible, "exceeding": inc.exceeding},
            "distance_to_misinforming": {str(a): _distance_to(sync, trajs, a) for a in liars},
            "discrepancy": {str(k): v for k, v in sorted(result.report.discrepancy.items())},
        }
    on, prox_off = runs["all-on"], runs["proximity-off"]
    cons_off, tr_off = runs["consistency-off"], runs["transparency-off"]
    tr_on = runs["all-on-misinfo"]
    summary = {
        "global_min_all_on": on["global_min_synchronized"],
        "global_min_proximity_off": prox_off["global_min_synchronized"],
        "inconsistency_all_on": on["inconsistency"],
        "inconsistency_consistency_off": cons_off["inconsistency"],
        "transparency_distance_ratio": {
            str(a): (tr_on["distance_to_misinforming"][str(a)] / tr_off["distance_to_misinforming"][str(a)]
                     if tr_off["distance_to_misinforming"][str(a)] > 0 else None)
            for a in liars
        },
    }
    _prepare_out(manifest.out)
    write_json(manifest.out / "comparison.json", {
        "scenario": base.name,
        "mode": base.mode,
        "seed": base.seed,
        "misinforming_agents": liars,
        "runs": runs,
        "summary": summary,
    })
    return EXIT_OK if converged else EXIT_NOT_CONVERGED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trustfg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("simulate", "optimize one scenario and write trajectories, metrics and a plot"),
                            ("ablate", "run the trust-factor ablations and write comparison.json")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--scenario", required=True, help="scenario JSON file or bundled scenario name")
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--disable", action="append", default=[], choices=FACTOR_TOGGLES, metavar="KIND",
                       help=f"turn off a factor kind ({', '.join(FACTOR_TOGGLES)}); repeatable")
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--seed", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and args.seed < 0:
        print("config error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    manifest = RunManifest(Path(args.scenario), args.out, tuple(args.disable), args.mode, args.seed)
    if args.command == "simulate":
        return cmd_simulate(manifest)
    return cmd_ablate(manifest)


if __name__ == "__main__":
    sys.exit(main())
