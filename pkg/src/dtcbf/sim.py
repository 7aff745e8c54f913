"""Closed-loop lane-keeping (LK) and obstacle-avoidance (OA) simulations.

Each step builds the controller problem at the current state, solves it
exactly, applies ``u`` to the full lateral model and records the step. In
the OA scenario the vehicle state is tracked relative to both lanes; the
lanes coincide until the split and then curve in opposite directions.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DtcbfError, SimulationError, UnsafeStateError
from .miqp import solve_miqp
from .vehicle import (LateralState, LkGainAndCost, VehicleParams, accel_constraint, build_lk_miqp,
                      build_oa_miqp, chosen_lane, compute_f0, h_lk_extended, lateral_acceleration,
                      lateral_velocity, step_vehicle)

LK, OA = "LK", "OA"
FORMAT_TRACE = "dtcbf.trace/1"
FORMAT_SCENARIO = "dtcbf.scenario/1"
FALLBACK = "fallback"
UNSAFE = "unsafe-state"


@dataclass(frozen=True)
class RoadProfile:
    """Road yaw rates over time.

    LK: straight until ``onset``, then a constant curve of ``radius`` (a
    negative radius curves the other way). OA: both lanes straight until
    ``onset``; afterwards lane 1 curves with ``V0 / radius`` and lane 2 with
    the opposite rate. ``radius=None`` keeps the road straight.
    """

    kind: str = LK
    onset: float = 10.0
    radius: float | None = 500.0

    def __post_init__(self):
        if self.kind not in (LK, OA):
            raise ContractViolation(f"unknown road kind {self.kind!r}")
        if self.radius is not None and (self.radius == 0 or not math.isfinite(self.radius)):
            raise ContractViolation(f"radius must be finite and nonzero, got {self.radius}")

    def rates(self, t: float, V0: float) -> tuple[float, float]:
        """``(rd1, rd2)`` at time ``t``; for LK both entries are the road rate."""
        if self.radius is None or t < self.onset - 1e-9:
            return 0.0, 0.0
        rd = V0 / self.radius
        return (rd, -rd) if self.kind == OA else (rd, rd)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "onset": self.onset, "radius": self.radius}

    @classmethod
    def from_dict(cls, data: dict) -> "RoadProfile":
        return cls(data["kind"], float(data["onset"]), None if data["radius"] is None else float(data["radius"]))


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str = LK
    initial_state: LateralState = LateralState(0.5, 0.0, 0.0, 0.0)
    duration: float = 20.0
    params: VehicleParams = field(default_factory=VehicleParams)
    gains: LkGainAndCost | None = None
    road: RoadProfile | None = None
    seed: int = 0
    oa_feedback: str = "shared"

    def __post_init__(self):
        if self.scenario not in (LK, OA):
            raise ContractViolation(f"unknown scenario {self.scenario!r}")
        if not (self.duration > 0 and math.isfinite(self.duration)):
            raise ContractViolation(f"duration must be positive, got {self.duration}")
        if not isinstance(self.initial_state, LateralState):
            object.__setattr__(self, "initial_state", LateralState.from_array(self.initial_state))
        if self.gains is None:
            object.__setattr__(self, "gains", LkGainAndCost.design(self.params))
        if self.road is None:
            road = RoadProfile(LK, 10.0) if self.scenario == LK else RoadProfile(OA, 1.0)
            object.__setattr__(self, "road", road)
        if self.road.kind != self.scenario:
            raise ContractViolation(f"{self.scenario} scenario given a {self.road.kind} road")

    @classmethod
    def lane_keeping(cls, **kwargs) -> "ScenarioConfig":
        return cls(LK, **kwargs)

    @classmethod
    def obstacle_avoidance(cls, **kwargs) -> "ScenarioConfig":
        kwargs.setdefault("initial_state", LateralState(-0.8, 0.0, 0.0, 0.0))
        kwargs.setdefault("duration", 10.0)
        return cls(OA, **kwargs)

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.duration / self.params.ts + 1e-9))

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_SCENARIO,
            "scenario": self.scenario,
            "initial_state": self.initial_state.as_array().tolist(),
            "duration": self.duration,
            "params": self.params.to_dict(),
            "gains": self.gains.to_dict(),
            "road": self.road.to_dict(),
            "seed": self.seed,
            "oa_feedback": self.oa_feedback,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        if data.get("format") != FORMAT_SCENARIO:
            raise ContractViolation(f"unsupported document format {data.get('format')!r}")
        return cls(data["scenario"], LateralState.from_array(data["initial_state"]), float(data["duration"]),
                   VehicleParams.from_dict(data["params"]), LkGainAndCost.from_dict(data["gains"]),
                   RoadProfile.from_dict(data["road"]), int(data["seed"]), data.get("oa_feedback", "shared"))


@dataclass(frozen=True)
class StepRecord:
    """One control step.

    ``lane_states``, ``lane_h`` and ``lane_accel`` hold one entry per lane
    (a single entry for LK). ``h`` is evaluated at the state before the
    step; ``accel`` is the lateral acceleration produced by ``u``.
    """

    step: int
    time: float
    lane_states: tuple[tuple[float, ...], ...]
    u: float
    delta: float
    lane_accel: tuple[float, ...]
    lane_h: tuple[float, ...]
    lane: int | None
    assignment: tuple[int, ...]
    status: str
    objective: float | None
    nodes: int

    @property
    def state(self) -> np.ndarray:
        return np.array(self.lane_states[0])

    @property
    def fallback(self) -> bool:
        return self.status != "optimal"

    def to_dict(self) -> dict:
        return {
            "step": self.step, "time": self.time, "lane_states": [list(s) for s in self.lane_states],
            "u": self.u, "delta": self.delta, "lane_accel": list(self.lane_accel), "lane_h": list(self.lane_h),
            "lane": self.lane, "assignment": list(self.assignment), "status": self.status,
            "objective": self.objective, "nodes": self.nodes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(d["step"], d["time"], tuple(tuple(s) for s in d["lane_states"]), d["u"], d["delta"],
                   tuple(d["lane_accel"]), tuple(d["lane_h"]), d["lane"], tuple(d["assignment"]), d["status"],
                   d["objective"], d["nodes"])


def _lane_columns(i: int) -> list[str]:
    return [f"y_lane{i}", f"psi_lane{i}", f"h_lane{i}", f"a_lane{i}"]


@dataclass
class SimTrace:
    """Records of a run.

    CSV columns, in order: ``step, time, y, nu, psi, r, u, delta, a, h``,
    then for OA ``y_lane1, psi_lane1, h_lane1, a_lane1, y_lane2, psi_lane2,
    h_lane2, a_lane2, lane``, then ``status, objective, nodes, fallback``.
    For OA the ``y, psi, a, h`` columns refer to the lane selected at that
    step (lanes are numbered 1 and 2 in files).
    """

    config: ScenarioConfig
    records: list[StepRecord] = field(default_factory=list)

    @property
    def scenario(self) -> str:
        return self.config.scenario

    def __len__(self) -> int:
        return len(self.records)

    def columns(self) -> list[str]:
        cols = ["step", "time", "y", "nu", "psi", "r", "u", "delta", "a", "h"]
        if self.scenario == OA:
            cols += _lane_columns(1) + _lane_columns(2) + ["lane"]
        return cols + ["status", "objective", "nodes", "fallback"]

    def rows(self) -> list[list]:
        out = []
        for rec in self.records:
            k = rec.lane if rec.lane is not None else 0
            y, nu, psi, r = rec.lane_states[k]
            row = [rec.step, rec.time, y, nu, psi, r, rec.u, rec.delta, rec.lane_accel[k], rec.lane_h[k]]
            if self.scenario == OA:
                for i in range(2):
                    s = rec.lane_states[i]
                    row += [s[0], s[2], rec.lane_h[i], rec.lane_accel[i]]
                row.append("" if rec.lane is None else rec.lane + 1)
            row += [rec.status, "" if rec.objective is None else rec.objective, rec.nodes, int(rec.fallback)]
            out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns())
        for row in self.rows():
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"format": FORMAT_TRACE, "config": self.config.to_dict(),
                "records": [r.to_dict() for r in self.records]}

    @classmethod
    def from_dict(cls, data: dict) -> "SimTrace":
        if data.get("format") != FORMAT_TRACE:
            raise ContractViolation(f"unsupported document format {data.get('format')!r}")
        return cls(ScenarioConfig.from_dict(data["config"]), [StepRecord.from_dict(r) for r in data["records"]])

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "SimTrace":
        return cls.from_dict(json.loads(text))

    def save(self, path, fmt: str = "csv") -> Path:
        path = Path(path)
        if fmt == "csv":
            path.write_text(self.to_csv())
        elif fmt == "json":
            path.write_text(self.to_json(indent=1) + "\n")
        else:
            raise ContractViolation(f"unknown trace format {fmt!r}")
        return path

    def lane_series(self, name: str, lane: int) -> np.ndarray:
        """``y``, ``h`` or ``a`` of one lane (0-based) over the run."""
        if name == "y":
            return np.array([r.lane_states[lane][0] for r in self.records])
        if name == "h":
            return np.array([r.lane_h[lane] for r in self.records])
        if name == "a":
            return np.array([r.lane_accel[lane] for r in self.records])
        raise ContractViolation(f"unknown series {name!r}")


def _solve_step(cfg: ScenarioConfig, states, rates):
    p, gains = cfg.params, cfg.gains
    if cfg.scenario == LK:
        problem = build_lk_miqp(p, gains, states[0], rates[0])
    else:
        problem = build_oa_miqp(p, gains, np.array(states), rates[0], rates[1], feedback=cfg.oa_feedback)
    return solve_miqp(problem)


def run_scenario(cfg: ScenarioConfig) -> SimTrace:
    """Simulate ``cfg.n_steps`` control steps.

    When the controller problem is infeasible (or the state is already
    beyond both lane edges) the legacy input clipped to the lane-1
    acceleration box is applied and the step's status says so. Solver
    errors raise :class:`SimulationError` carrying the partial trace.
    """
    p, gains = cfg.params, cfg.gains
    n_lanes = 2 if cfg.scenario == OA else 1
    states = [cfg.initial_state.as_array() for _ in range(n_lanes)]
    trace = SimTrace(cfg)
    for k in range(cfg.n_steps):
        t = k * p.ts
        rates = cfg.road.rates(t, p.V0)[:n_lanes]
        try:
            sol = _solve_step(cfg, states, rates)
            status = sol.status
        except UnsafeStateError:
            sol, status = None, UNSAFE
        except DtcbfError as exc:
            raise SimulationError(f"step {k} (t={t:.2f} s): {exc}", trace) from exc
        legacy = gains.legacy_input(states[0], rates[0])
        if sol is not None and sol.optimal:
            u, delta = float(sol.u[0]), float(sol.u[1])
            lane = chosen_lane(sol) if cfg.scenario == OA else 0
            assignment, objective, nodes = sol.assignment, sol.objective, sol.nodes_explored
        else:
            box = accel_constraint(p, compute_f0(p, states[0][1], states[0][3], rates[0]))
            u = box.clip(legacy) if box.feasible else legacy
            delta = u - legacy
            lane, assignment, objective = None, (), None
            nodes = 0 if sol is None else sol.nodes_explored
            status = f"{status}-{FALLBACK}"
        trace.records.append(StepRecord(
            k, t, tuple(tuple(float(v) for v in s) for s in states), u, delta,
            tuple(float(lateral_acceleration(p, s, u, rd)) for s, rd in zip(states, rates)),
            tuple(float(h_lk_extended(p, s[0], lateral_velocity(p, s))) for s in states),
            lane, tuple(assignment), status, objective, nodes,
        ))
        states = [step_vehicle(p, s, u, rd) for s, rd in zip(states, rates)]
    return trace


@dataclass(frozen=True)
class Metrics:
    """Safety summary of a trace.

    For OA, ``max_abs_y`` refers to the committed lane (the lane selected at
    the last solved step), ``max_abs_accel`` to the lane selected at each
    step, and ``branch_switches`` counts lane changes between solved steps
    after the split.
    """

    steps: int
    max_abs_y: float
    max_abs_accel: float
    min_h: tuple[float, ...]
    branch_switches: int
    infeasible_steps: int
    mean_nodes: float
    committed_lane: int | None

    def to_dict(self) -> dict:
        return {
            "steps": self.steps, "max_abs_y": self.max_abs_y, "max_abs_accel": self.max_abs_accel,
            "min_h": list(self.min_h), "branch_switches": self.branch_switches,
            "infeasible_steps": self.infeasible_steps, "mean_nodes": self.mean_nodes,
            "committed_lane": None if self.committed_lane is None else self.committed_lane + 1,
        }


def metrics(trace: SimTrace) -> Metrics:
    if not trace.records:
        raise ContractViolation("metrics of an empty trace")
    recs = trace.records
    n_lanes = len(recs[0].lane_states)
    lanes = [r.lane for r in recs if r.lane is not None]
    committed = lanes[-1] if lanes else None
    focus = committed if committed is not None else 0
    switches = 0
    if trace.scenario == OA:
        split = trace.config.road.onset
        after = [r.lane for r in recs if r.lane is not None and r.time >= split - 1e-9]
        switches = sum(a != b for a, b in zip(after, after[1:]))
    return Metrics(
        steps=len(recs),
        max_abs_y=float(np.max(np.abs(trace.lane_series("y", focus)))),
        max_abs_accel=float(max(abs(r.lane_accel[r.lane if r.lane is not None else focus]) for r in recs)),
        min_h=tuple(float(np.min(trace.lane_series("h", i))) for i in range(n_lanes)),
        branch_switches=switches,
        infeasible_steps=sum(r.fallback for r in recs),
        mean_nodes=float(np.mean([r.nodes for r in recs])),
        committed_lane=committed,
    )
