"""Command-line entry point.

Every subcommand writes its artifacts into ``--out`` (default: a fresh
``runs/<timestamp>`` directory) and prints a one-line summary. Exit status is
0 on success, 1 when a run or check fails (a JSON diagnostic goes to stderr)
and 2 for usage errors.
"""
from __future__ import annotations

import argparse
import datetime
import json
import sys
from pathlib import Path

import numpy as np

from .cbf import (ComparisonParams, barrier_value, check_invariance, in_prior_input_sets,
                  in_safe_input_set, random_affine_case, sample_safe_states)
from .errors import DtcbfError
from .miqp import brute_force, random_problem, solve_miqp
from .sim import LK, OA, RoadProfile, ScenarioConfig, metrics, run_scenario
from .vehicle import (LateralState, LkGainAndCost, VehicleParams, build_lk_miqp, build_oa_miqp,
                      full_system, lk_barrier, lk_input_search)

DEFAULT_RADIUS = 500.0


class CommandFailed(Exception):
    """A subcommand ran but its check did not pass."""


def _x0(text: str) -> LateralState:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from exc
    if len(values) != 4:
        raise argparse.ArgumentTypeError("x0 needs four values: y,nu,psi,r")
    return LateralState(*values)


def _positive(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text}")
    return value


def _gammas(text: str) -> list[float]:
    values = [float(v) for v in text.split(",")]
    if any(not 0 < g <= 1 for g in values):
        raise argparse.ArgumentTypeError("gamma values must lie in (0, 1]")
    return values


def _common(parser: argparse.ArgumentParser, x0: str | None = None, duration: float | None = None):
    parser.add_argument("--params", type=Path, help="vehicle parameter JSON (defaults: built-in table)")
    parser.add_argument("--out", type=Path, help="output directory (default: runs/<timestamp>)")
    parser.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    parser.add_argument("--format", choices=("csv", "json"), default="csv", help="trace format (default: csv)")
    if duration is not None:
        parser.add_argument("--duration", type=_positive, default=duration,
                            help=f"simulated time in s (default: {duration:g})")
    if x0 is not None:
        parser.add_argument("--x0", type=_x0, default=_x0(x0), help=f"initial y,nu,psi,r (default: {x0})")
    parser.add_argument("--radius", type=float, default=None,
                        help=f"road radius in m (default: {DEFAULT_RADIUS:g} for scenarios)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtcbf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-lk", help="lane keeping: straight road, then a curve from --onset")
    _common(p, x0="0.5,0,0,0", duration=20.0)
    p.add_argument("--onset", type=float, default=10.0, help="curve onset in s (default: 10)")

    p = sub.add_parser("run-oa", help="obstacle avoidance: the lane splits at --split")
    _common(p, x0="-0.8,0,0,0", duration=10.0)
    p.add_argument("--split", type=float, default=1.0, help="split time in s (default: 1)")
    p.add_argument("--feedback", choices=("shared", "per-lane"), default="shared",
                   help="legacy feedback tracks lane 1 (shared) or each lane (per-lane)")

    p = sub.add_parser("check-invariance", help="roll sampled safe states forward under the LK controller")
    _common(p)
    p.add_argument("--samples", type=int, default=100, help="number of initial states (default: 100)")
    p.add_argument("--steps", type=int, default=50, help="rollout length (default: 50)")

    p = sub.add_parser("compare-safesets", help="membership statistics of the safe input set variants")
    _common(p)
    p.add_argument("--samples", type=int, default=10000, help="samples per gamma (default: 10000)")
    p.add_argument("--gammas", type=_gammas, default=[0.25, 0.5, 0.75, 1.0],
                   help="comma list in (0, 1] (default: 0.25,0.5,0.75,1)")

    p = sub.add_parser("solver-selftest", help="branch-and-bound against exhaustive enumeration")
    _common(p)
    p.add_argument("--count", type=int, default=100, help="random problems (default: 100)")

    p = sub.add_parser("compile-debug", help="dump the controller problem at one state as JSON")
    _common(p, x0="0.5,0,0,0")
    p.add_argument("--scenario", choices=("lk", "oa"), default="lk", help="problem type (default: lk)")
    return parser


def _out_dir(args) -> Path:
    out = args.out or Path("runs") / datetime.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _params(args) -> VehicleParams:
    return VehicleParams.load(args.params) if args.params else VehicleParams()


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _run(args, scenario: str) -> str:
    p = _params(args)
    radius = args.radius if args.radius is not None else DEFAULT_RADIUS
    if scenario == LK:
        road = RoadProfile(LK, args.onset, radius)
        cfg = ScenarioConfig(LK, args.x0, args.duration, p, road=road, seed=args.seed)
    else:
        road = RoadProfile(OA, args.split, radius)
        cfg = ScenarioConfig(OA, args.x0, args.duration, p, road=road, seed=args.seed,
                             oa_feedback=args.feedback)
    out = _out_dir(args)
    trace = run_scenario(cfg)
    trace.save(out / f"trace.{args.format}", args.format)
    summary = metrics(trace)
    _write_json(out / "metrics.json", summary.to_dict())
    _write_json(out / "scenario.json", cfg.to_dict())
    return (f"{scenario}: {summary.steps} steps, max|y|={summary.max_abs_y:.4f} m, "
            f"max|a|={summary.max_abs_accel:.4f} m/s^2, infeasible={summary.infeasible_steps} -> {out}")


def _check_invariance(args) -> str:
    p = _params(args)
    rd = p.V0 / args.radius if args.radius else 0.0
    gains = LkGainAndCost.design(p)
    system, spec = full_system(p, rd), lk_barrier(p)
    rng = np.random.default_rng(args.seed)
    # box in (y, psi, nu, r) order
    low, high = (-p.y_max, -0.05, -1.0, -0.2), (p.y_max, 0.05, 1.0, 0.2)
    states = sample_safe_states(spec, low, high, args.samples, rng)
    report = check_invariance(system, spec, states, lk_input_search(p, gains, rd), steps=args.steps, tol=1e-9)
    out = _out_dir(args)
    _write_json(out / "invariance.json", {"rd": rd, "steps": args.steps, **report.summary()})
    line = f"{report.n_invariant}/{report.n_samples} invariant over {args.steps} steps -> {out}"
    if report.n_invariant != report.n_samples:
        raise CommandFailed(line)
    return line


def alpha_for(gamma: float):
    """Class-K function with ``alpha(s) < s`` for ``gamma < 1`` and the identity at ``gamma = 1``."""
    return lambda s: gamma * s / (1.0 + (1.0 - gamma) * s)


def _compare_safesets(args) -> str:
    rng = np.random.default_rng(args.seed)
    rows = []
    for gamma in args.gammas:
        params = ComparisonParams(gamma, alpha_for(gamma))
        counts = dict(samples=0, in_K=0, in_gamma=0, in_alpha=0, gamma_not_in_K=0, alpha_not_in_K=0,
                      gamma_mismatch=0, alpha_mismatch=0)
        while counts["samples"] < args.samples:
            sys_, spec = random_affine_case(rng)
            x = rng.normal(size=sys_.n)
            if barrier_value(spec, x) < 0:
                continue
            for _ in range(10):
                u = rng.uniform(np.array(sys_.input_lower) * 1.1, np.array(sys_.input_upper) * 1.1)
                in_k = in_safe_input_set(sys_, spec, x, u)
                in_g, in_a = in_prior_input_sets(sys_, spec, x, u, params)
                counts["samples"] += 1
                counts["in_K"] += in_k
                counts["in_gamma"] += in_g
                counts["in_alpha"] += in_a
                counts["gamma_not_in_K"] += in_g and not in_k
                counts["alpha_not_in_K"] += in_a and not in_k
                counts["gamma_mismatch"] += in_g != in_k
                counts["alpha_mismatch"] += in_a != in_k
        rows.append({"gamma": gamma, **counts})
    out = _out_dir(args)
    _write_json(out / "safesets.json", {"alpha": "gamma*s/(1+(1-gamma)*s)", "rows": rows})
    violations = sum(r["gamma_not_in_K"] + r["alpha_not_in_K"] for r in rows)
    line = f"{violations} inclusion violations over {sum(r['samples'] for r in rows)} samples -> {out}"
    if violations:
        raise CommandFailed(line)
    return line


def _solver_selftest(args) -> str:
    rng = np.random.default_rng(args.seed)
    cases = []
    for i in range(args.count):
        problem = random_problem(rng)
        fast, ref = solve_miqp(problem), brute_force(problem)
        agree = fast.status == ref.status and (not fast.optimal or abs(fast.objective - ref.objective) <= 1e-8)
        cases.append({"case": i, "status": fast.status, "reference_status": ref.status,
                      "objective": None if not fast.optimal else fast.objective,
                      "reference_objective": None if not ref.optimal else ref.objective,
                      "nodes": fast.nodes_explored, "agree": agree})
    n_agree = sum(c["agree"] for c in cases)
    out = _out_dir(args)
    line = f"{n_agree}/{args.count} oracle agreement"
    _write_json(out / "selftest.json", {"seed": args.seed, "summary": line, "cases": cases})
    (out / "selftest.txt").write_text(line + "\n")
    if n_agree != args.count:
        raise CommandFailed(f"{line} -> {out}")
    return f"{line} -> {out}"


def _compile_debug(args) -> str:
    p = _params(args)
    gains = LkGainAndCost.design(p)
    x = args.x0.as_array()
    if args.scenario == "lk":
        rd = p.V0 / args.radius if args.radius else 0.0
        problem = build_lk_miqp(p, gains, x, rd)
    else:
        rd = p.V0 / (args.radius if args.radius else DEFAULT_RADIUS)
        problem = build_oa_miqp(p, gains, x, rd, -rd)
    out = _out_dir(args)
    _write_json(out / "problem.json", problem.to_dict())
    stats = problem.system.stats()
    return f"{args.scenario}: " + ", ".join(f"{k}={v}" for k, v in stats.items()) + f" -> {out}"


def dispatch(args) -> str:
    if args.command == "run-lk":
        return _run(args, LK)
    if args.command == "run-oa":
        return _run(args, OA)
    if args.command == "check-invariance":
        return _check_invariance(args)
    if args.command == "compare-safesets":
        return _compare_safesets(args)
    if args.command == "solver-selftest":
        return _solver_selftest(args)
    return _compile_debug(args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        print(dispatch(args))
    except CommandFailed as exc:
        print(json.dumps({"error": "check-failed", "message": str(exc)}), file=sys.stderr)
        return 1
    except (DtcbfError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
