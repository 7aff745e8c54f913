"""Exact branch-and-bound for small mixed-integer QPs with SOS-1 structure.

Binaries are branched as constants (never relaxed): ``b = 1`` pins the
slacks it is paired with to zero and thereby enforces their constraints,
``b = 0`` frees them and drops the constraints. Binary-free SOS-1 groups are
branched on which member may be nonzero. A node's relaxation keeps only the
constraints already enforced by its fixed decisions, so it bounds every leaf
below it.
"""
from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, ResourceLimitError, SolverFailure
from .micp import (EQ, EPS_STRICT, GT, BranchPoint, ConstraintSystem, Enforcement,
                   branch_points, enforcement)
from .qp import cholesky_factor, solve_qp

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
FEAS_TOL = 1e-8
NODE_LIMIT = 10**6
FORMAT_PROBLEM = "dtcbf.miqp-problem/1"
FORMAT_SOLUTION = "dtcbf.miqp-solution/1"


@dataclass(frozen=True)
class QuadraticObjective:
    """``0.5 z' H z + F' z`` over the decision variables."""

    H: np.ndarray
    F: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        F = np.atleast_1d(np.asarray(self.F, dtype=float))
        if H.shape != (F.size, F.size):
            raise ContractViolation(f"H has shape {H.shape}, F has {F.size} entries")
        cholesky_factor(H)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "F", F)

    def __call__(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.H @ z + self.F @ z)


@dataclass(frozen=True)
class MiqpProblem:
    objective: QuadraticObjective
    system: ConstraintSystem
    eps_strict: float = EPS_STRICT

    def __post_init__(self):
        if self.objective.F.size != self.system.num_decision:
            raise ContractViolation(
                f"objective has {self.objective.F.size} variables, system has {self.system.num_decision}")

    def to_dict(self) -> dict:
        return {"format": FORMAT_PROBLEM, "H": self.objective.H.tolist(), "F": self.objective.F.tolist(),
                "eps_strict": self.eps_strict, "system": self.system.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "MiqpProblem":
        if data.get("format") != FORMAT_PROBLEM:
            raise ContractViolation(f"unsupported document format {data.get('format')!r}")
        return cls(QuadraticObjective(np.array(data["H"]), np.array(data["F"])),
                   ConstraintSystem.from_dict(data["system"]), float(data["eps_strict"]))

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "MiqpProblem":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Solution:
    status: str
    u: np.ndarray | None = None
    objective: float = math.inf
    binaries: dict[str, int] = field(default_factory=dict)
    sos_choices: dict[int, str] = field(default_factory=dict)
    assignment: tuple[int, ...] = ()
    slacks: dict[str, float] = field(default_factory=dict)
    active_set: tuple[int, ...] = ()
    nodes_explored: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_SOLUTION,
            "status": self.status,
            "u": None if self.u is None else self.u.tolist(),
            "objective": None if math.isinf(self.objective) else self.objective,
            "binaries": self.binaries,
            "sos_choices": {str(k): v for k, v in self.sos_choices.items()},
            "assignment": list(self.assignment),
            "slacks": self.slacks,
            "active_set": list(self.active_set),
            "nodes_explored": self.nodes_explored,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Solution":
        if data.get("format") != FORMAT_SOLUTION:
            raise ContractViolation(f"unsupported document format {data.get('format')!r}")
        return cls(data["status"], None if data["u"] is None else np.array(data["u"]),
                   math.inf if data["objective"] is None else data["objective"],
                   dict(data["binaries"]), {int(k): v for k, v in data["sos_choices"].items()},
                   tuple(data["assignment"]), dict(data["slacks"]), tuple(data["active_set"]),
                   int(data["nodes_explored"]))


def _node_rows(problem: MiqpProblem, enf: Enforcement):
    system = problem.system
    d = system.num_decision
    eq_rows, eq_rhs, in_rows, in_rhs = [], [], [], []
    for con, on in zip(system.constraints, enf.enforced):
        if not on:
            continue
        if con.sense == EQ:
            eq_rows.append(con.coeffs)
            eq_rhs.append(-con.constant)
        else:
            in_rows.append(con.coeffs)
            in_rhs.append((problem.eps_strict if con.sense == GT else 0.0) - con.constant)
    eye = np.eye(d)
    for i, var in enumerate(system.variables[:d]):
        if i in enf.pinned:
            eq_rows.append(eye[i])
            eq_rhs.append(0.0)
            continue
        if np.isfinite(var.lower):
            in_rows.append(eye[i])
            in_rhs.append(var.lower)
        if np.isfinite(var.upper):
            in_rows.append(-eye[i])
            in_rhs.append(-var.upper)
    as_array = lambda rows: np.array(rows, dtype=float).reshape(-1, d)
    return as_array(eq_rows), np.array(eq_rhs), as_array(in_rows), np.array(in_rhs)


def _solve_node(problem: MiqpProblem, enf: Enforcement):
    A_eq, b_eq, A_in, b_in = _node_rows(problem, enf)
    return solve_qp(problem.objective.H, problem.objective.F, A_eq, b_eq, A_in, b_in)


def _tie(obj: float) -> float:
    return 1e-9 * (1.0 + abs(obj))


def _order_key(points: list[BranchPoint], assignment) -> tuple[int, ...]:
    # position of each choice in its branch order: branch A (b = 1) is 0
    return tuple(p.options.index(v) for p, v in zip(points, assignment))


def _better(obj, key, best) -> bool:
    if best is None:
        return True
    best_obj, best_key = best[0], best[3]
    if obj < best_obj - _tie(best_obj):
        return True
    return abs(obj - best_obj) <= _tie(best_obj) and key < best_key


def slack_values(system: ConstraintSystem, enf: Enforcement, z, eps_strict: float = EPS_STRICT) -> np.ndarray:
    """Slack values completing a leaf assignment at decision point ``z``.

    Pinned slacks are zero. Each dropped constraint is absorbed by its first
    free slack; a slack shared by several dropped constraints takes the most
    demanding value.
    """
    values = np.zeros(len(system.variables))
    need: dict[int, list[tuple[float, float]]] = {}
    for con, on in zip(system.constraints, enf.enforced):
        if on:
            continue
        sid, coef = next((s, c) for s, c in con.slacks if s not in enf.pinned)
        target = eps_strict if con.sense == GT else 0.0
        residual = float(con.value(z)) - target
        if con.sense == EQ or residual < 0:
            need.setdefault(sid, []).append((-residual / coef, coef))
    for sid, amounts in need.items():
        if len(amounts) == 1 or all(c > 0 for _, c in amounts):
            values[sid] = max(a for a, _ in amounts)
        else:
            values[sid] = min(a for a, _ in amounts)
    return values


def _finish(problem: MiqpProblem, points: list[BranchPoint], assignment, qp, nodes) -> Solution:
    system = problem.system
    enf = enforcement(system, points, assignment)
    z = qp.x
    slack = slack_values(system, enf, z, problem.eps_strict)
    binaries = {system.variables[b].name: int(enf.binaries.get(b, 0)) for b in system.ids("binary")}
    choices = {}
    for point, option in zip(points, assignment):
        if point.kind == "group":
            choices[point.target] = system.variables[system.sos1[point.target][option]].name
    active = []
    for k, (con, on) in enumerate(zip(system.constraints, enf.enforced)):
        target = problem.eps_strict if con.sense == GT else 0.0
        if on and abs(float(con.value(z)) - target) <= FEAS_TOL * (1.0 + abs(con.constant)):
            active.append(k)
    return Solution(OPTIMAL, z.copy(), problem.objective(z), binaries, choices, tuple(assignment),
                    {system.variables[i].name: float(slack[i]) for i in system.ids("slack")},
                    tuple(active), nodes)


def solve_miqp(problem: MiqpProblem, node_limit: int = NODE_LIMIT) -> Solution:
    """Global optimum over all branch assignments by best-first branch-and-bound.

    Ties between leaves (objectives within ``1e-9`` relative) go to the
    assignment that comes first in branch order: branch points in the order
    of :func:`branch_points`, ``b = 1`` before ``b = 0`` and group members
    by index. Among equal bounds, nodes are expanded in creation order.
    """
    system = problem.system
    points = branch_points(system)
    counter = itertools.count()
    root_enf = enforcement(system, points, ())
    if not root_enf.cardinality_ok:
        return Solution(INFEASIBLE, nodes_explored=0)
    root = _solve_node(problem, root_enf)
    nodes = 1
    if not root.optimal:
        return Solution(INFEASIBLE, nodes_explored=nodes)
    heap = [(root.objective, next(counter), (), root_enf, root)]
    best = None  # (objective, assignment, qp, order key)
    while heap:
        bound, _, assign, enf, res = heapq.heappop(heap)
        if best is not None and bound > best[0] + _tie(best[0]):
            continue
        if len(assign) == len(points):
            key = _order_key(points, assign)
            if _better(res.objective, key, best):
                best = (res.objective, assign, res, key)
            continue
        for option in points[len(assign)].options:
            child = assign + (option,)
            child_enf = enforcement(system, points, child)
            if not child_enf.cardinality_ok:
                continue
            if nodes >= node_limit:
                raise ResourceLimitError(f"node limit {node_limit} exceeded")
            nodes += 1
            if np.array_equal(child_enf.enforced, enf.enforced) and child_enf.pinned == enf.pinned:
                child_res = res
            else:
                child_res = _solve_node(problem, child_enf)
                if not child_res.optimal:
                    continue
                if child_res.objective < bound - 1e-9 * (1.0 + abs(bound)):
                    raise SolverFailure(f"child bound {child_res.objective} below parent bound {bound}")
            if best is not None and child_res.objective > best[0] + _tie(best[0]):
                continue
            heapq.heappush(heap, (child_res.objective, next(counter), child, child_enf, child_res))
    if best is None:
        return Solution(INFEASIBLE, nodes_explored=nodes)
    return _finish(problem, points, best[1], best[2], nodes)


def brute_force(problem: MiqpProblem, max_branch_points: int = 20) -> Solution:
    """Solve every leaf QP and keep the best; the reference for :func:`solve_miqp`.

    ``nodes_explored`` counts the leaves that pass the cardinality filter.
    """
    system = problem.system
    points = branch_points(system)
    if len(points) > max_branch_points:
        raise ResourceLimitError(f"{len(points)} branch points exceed the oracle budget {max_branch_points}")
    best = None
    leaves = 0
    for assignment in itertools.product(*(p.options for p in points)):
        enf = enforcement(system, points, assignment)
        if not enf.cardinality_ok:
            continue
        leaves += 1
        res = _solve_node(problem, enf)
        key = _order_key(points, assignment)
        if res.optimal and _better(res.objective, key, best):
            best = (res.objective, assignment, res, key)
    if best is None:
        return Solution(INFEASIBLE, nodes_explored=leaves)
    return _finish(problem, points, best[1], best[2], leaves)


def verify_solution(problem: MiqpProblem, sol: Solution) -> dict[str, float]:
    """Worst violations of an optimal solution, recomputed from the problem data.

    Checks every constraint with the reported slack values, variable bounds,
    SOS-1 groups, binaries, cardinality and the reported objective.
    """
    system = problem.system
    d = system.num_decision
    values = np.zeros(len(system.variables))
    values[:d] = sol.u
    names = {v.name: i for i, v in enumerate(system.variables)}
    for name, val in sol.slacks.items():
        values[names[name]] = val
    for name, val in sol.binaries.items():
        values[names[name]] = val
    worst_con = 0.0
    for con in system.constraints:
        lhs = float(con.value(sol.u)) + sum(c * values[s] for s, c in con.slacks)
        if con.sense == EQ:
            worst_con = max(worst_con, abs(lhs))
        else:
            target = problem.eps_strict if con.sense == GT else 0.0
            worst_con = max(worst_con, target - lhs)
    worst_bound = 0.0
    for i, var in enumerate(system.variables):
        worst_bound = max(worst_bound, var.lower - values[i], values[i] - var.upper)
    sos = 0.0
    for group in system.sos1:
        nonzero = sorted((abs(values[i]) for i in group), reverse=True)
        sos = max(sos, nonzero[1] if len(nonzero) > 1 else 0.0)
    card = 0.0
    for c in system.cardinality:
        card = max(card, c.at_least - sum(values[b] for b in c.members))
    integrality = max((float(min(abs(values[b]), abs(values[b] - 1))) for b in system.ids("binary")), default=0.0)
    recomputed = problem.objective(sol.u)
    return {
        "constraints": max(worst_con, 0.0),
        "bounds": max(worst_bound, 0.0),
        "sos1": sos,
        "cardinality": max(card, 0.0),
        "integrality": integrality,
        "objective": abs(recomputed - sol.objective) / max(1.0, abs(recomputed)),
    }


def random_problem(rng: np.random.Generator, max_decision: int = 4, max_groups: int = 4) -> MiqpProblem:
    """Random MIQP with at most ``max_decision`` decision variables and ``max_groups`` SOS-1 groups.

    Mixes plain constraints, binary disjunctions (two or three disjuncts,
    each an atom or a conjunction of two atoms), slack-pair disjunctions and
    occasional finite decision bounds. Some draws are infeasible.
    """
    from .micp import GE, LE, AffinePredicate, And, Atom, Or, compile_formula

    d = int(rng.integers(1, max_decision + 1))

    def atom():
        sense = (GE, GT, LE)[int(rng.integers(0, 3))]
        return Atom(AffinePredicate(rng.normal(size=d), rng.normal() * 2.0, sense))

    parts = [atom() for _ in range(int(rng.integers(0, 3)))]
    budget = int(rng.integers(1, max_groups + 1))
    while budget > 0:
        kind = int(rng.integers(0, 2))
        if kind == 0 and budget >= 2:
            k = min(int(rng.integers(2, 4)), budget)
            disjuncts = tuple(atom() if rng.random() < 0.5 else And((atom(), atom())) for _ in range(k))
            parts.append(Or(disjuncts))
            budget -= k
        else:
            parts.append(Or((atom(), And((atom(), atom())) if rng.random() < 0.5 else atom()), "slack"))
            budget -= 1
    bounds = None
    if rng.random() < 0.3:
        bounds = [(-abs(rng.normal()) - 0.5, abs(rng.normal()) + 0.5) for _ in range(d)]
    system = compile_formula(And(tuple(parts)), d, bounds=bounds)
    L = rng.normal(size=(d, d))
    H = L @ L.T + 0.1 * np.eye(d)
    return MiqpProblem(QuadraticObjective(0.5 * (H + H.T), rng.normal(size=d)), system)
