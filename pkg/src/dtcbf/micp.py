"""Mixed-integer encodings of Boolean and piecewise compositions of affine predicates.

Predicates are affine in a vector of decision variables ``z``. A formula
built from :class:`Atom`, :class:`Not`, :class:`And` and :class:`Or` is
compiled into a :class:`ConstraintSystem`: affine constraints, slack
variables, binaries, SOS-1 groups and cardinality constraints.

Two disjunction encodings are available:

``"binary"``
    Each disjunct ``i`` gets a binary ``b_i`` and a free slack ``t_i`` that is
    subtracted from every constraint of the disjunct (``h - t_i >= 0``), with
    SOS-1 ``{t_i, b_i}`` and ``sum(b) >= 1``. Setting ``b_i = 1`` pins
    ``t_i = 0`` and enforces the disjunct; ``b_i = 0`` leaves ``t_i`` free,
    which relaxes every constraint it touches.

``"slack"``
    Two disjuncts only. Each gets a non-negative slack added to its
    constraints and SOS-1 ``{s_1, s_2}``, so at least one disjunct is enforced
    with its slack at zero. No binaries are introduced.

Negation is pushed to the leaves before compilation, where it flips the
predicate sense. Strict senses are kept symbolic in the IR and resolved as
``>= eps_strict`` by consumers.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArityError, ContractViolation, ResourceLimitError, WrongVariantError

GE, GT, LE, LT, EQ = ">=", ">", "<=", "<", "=="
SENSES = (GE, GT, LE, LT, EQ)
_NEGATED = {GE: LT, GT: LE, LE: GT, LT: GE}

EPS_STRICT = 1e-9
FORMAT_SYSTEM = "dtcbf.constraint-system/1"


@dataclass(frozen=True)
class AffinePredicate:
    """``coeffs @ z + constant  <sense>  0``."""

    coeffs: tuple[float, ...]
    constant: float = 0.0
    sense: str = GE

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in np.atleast_1d(self.coeffs)))
        object.__setattr__(self, "constant", float(self.constant))
        if self.sense not in SENSES:
            raise ContractViolation(f"unknown sense {self.sense!r}")

    @property
    def dim(self) -> int:
        return len(self.coeffs)

    def value(self, z):
        z = np.asarray(z, dtype=float)
        return z @ np.asarray(self.coeffs) + self.constant

    def holds(self, z, eps_strict: float | None = None):
        """Truth value at ``z`` (array of points allowed).

        With ``eps_strict`` given, strict senses use the margin instead of a
        strict comparison.
        """
        v = self.value(z)
        if self.sense == GE:
            return v >= 0
        if self.sense == LE:
            return v <= 0
        if self.sense == EQ:
            return v == 0
        if self.sense == GT:
            return v >= eps_strict if eps_strict is not None else v > 0
        return v <= -eps_strict if eps_strict is not None else v < 0


def negate(p: AffinePredicate) -> AffinePredicate:
    """Complement of a predicate: ``>= 0`` becomes ``< 0`` and so on."""
    if p.sense == EQ:
        raise ContractViolation("the complement of an equality is not a single affine predicate")
    return AffinePredicate(p.coeffs, p.constant, _NEGATED[p.sense])


def _normalized(p: AffinePredicate) -> tuple[tuple[float, ...], float, str]:
    """Rewrite ``<=`` and ``<`` as ``>=`` and ``>`` by flipping signs."""
    if p.sense in (LE, LT):
        return tuple(-c for c in p.coeffs), -p.constant, GE if p.sense == LE else GT
    return p.coeffs, p.constant, p.sense


# --- formulas ---------------------------------------------------------------

@dataclass(frozen=True)
class Atom:
    pred: AffinePredicate


@dataclass(frozen=True)
class Not:
    arg: "Formula"


@dataclass(frozen=True)
class And:
    args: tuple["Formula", ...]

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(_lift(a) for a in self.args))
        if not self.args:
            raise ArityError("conjunction of zero operands")


@dataclass(frozen=True)
class Or:
    args: tuple["Formula", ...]
    encoding: str = "binary"

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(_lift(a) for a in self.args))
        if not self.args:
            raise ArityError("disjunction of zero operands")
        if self.encoding not in ("binary", "slack"):
            raise ContractViolation(f"unknown disjunction encoding {self.encoding!r}")
        if self.encoding == "slack" and len(self.args) != 2:
            raise ArityError("slack-pair encoding needs exactly two disjuncts")


Formula = Atom | Not | And | Or


def _lift(f) -> Formula:
    if isinstance(f, AffinePredicate):
        return Atom(f)
    if isinstance(f, (Atom, Not, And, Or)):
        return f
    raise WrongVariantError(f"not a formula: {type(f).__name__}")


def implies(p, q) -> Or:
    return Or((Not(_lift(p)), _lift(q)))


def xor(p, q) -> And:
    p, q = _lift(p), _lift(q)
    return And((Or((p, q)), Not(And((p, q)))))


def equiv(p, q) -> Not:
    return Not(xor(p, q))


def if_then_else(guard, body, otherwise=None) -> Formula:
    """``guard -> body`` (and ``not guard -> otherwise`` when given)."""
    guard, body = _lift(guard), _lift(body)
    then = Or((Not(guard), body))
    if otherwise is None:
        return then
    return And((then, Or((guard, _lift(otherwise)))))


def evaluate(formula, z, eps_strict: float | None = None):
    """Truth value of ``formula`` at ``z``, straight from the Boolean definition."""
    f = _lift(formula)
    if isinstance(f, Atom):
        return f.pred.holds(z, eps_strict)
    if isinstance(f, Not):
        return np.logical_not(evaluate(f.arg, z, eps_strict))
    parts = [evaluate(a, z, eps_strict) for a in f.args]
    if isinstance(f, And):
        return np.logical_and.reduce(parts)
    return np.logical_or.reduce(parts)


def to_nnf(formula, negated: bool = False) -> Formula:
    """Push negations to the atoms (De Morgan)."""
    f = _lift(formula)
    if isinstance(f, Atom):
        return Atom(negate(f.pred)) if negated else f
    if isinstance(f, Not):
        return to_nnf(f.arg, not negated)
    args = tuple(to_nnf(a, negated) for a in f.args)
    if isinstance(f, And):
        return Or(args) if negated else And(args)
    return And(args) if negated else Or(args, f.encoding)


def atoms(formula) -> list[AffinePredicate]:
    f = _lift(formula)
    if isinstance(f, Atom):
        return [f.pred]
    if isinstance(f, Not):
        return atoms(f.arg)
    return [p for a in f.args for p in atoms(a)]


# --- constraint IR ----------------------------------------------------------

@dataclass(frozen=True)
class Variable:
    name: str
    kind: str  # "decision" | "slack" | "binary"
    lower: float = -math.inf
    upper: float = math.inf
    origin: str = ""


@dataclass(frozen=True)
class Constraint:
    """``coeffs @ z + constant + sum(c * s for s, c in slacks)  <sense>  0``.

    ``sense`` is one of ``>=``, ``>`` or ``==`` and ``coeffs`` runs over the
    decision variables only.
    """

    coeffs: tuple[float, ...]
    constant: float
    sense: str
    slacks: tuple[tuple[int, float], ...] = ()
    origin: str = ""

    def value(self, z):
        return np.asarray(z, dtype=float) @ np.asarray(self.coeffs) + self.constant


@dataclass(frozen=True)
class Cardinality:
    """``sum(binaries[members]) >= at_least``."""

    members: tuple[int, ...]
    at_least: int = 1


@dataclass(frozen=True)
class ConstraintSystem:
    variables: tuple[Variable, ...]
    constraints: tuple[Constraint, ...] = ()
    sos1: tuple[tuple[int, ...], ...] = ()
    cardinality: tuple[Cardinality, ...] = ()

    def __post_init__(self):
        for name in ("variables", "constraints", "sos1", "cardinality"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self._validate()

    def _validate(self):
        kinds = [v.kind for v in self.variables]
        d = self.num_decision
        if any(k == "decision" for k in kinds[d:]):
            raise ContractViolation("decision variables must come first")
        nvar = len(self.variables)
        for con in self.constraints:
            if len(con.coeffs) != d:
                raise ContractViolation(f"constraint {con.origin!r} has {len(con.coeffs)} coefficients, expected {d}")
            if con.sense not in (GE, GT, EQ):
                raise ContractViolation(f"constraint sense {con.sense!r} not normalized")
            for sid, coef in con.slacks:
                if not 0 <= sid < nvar or kinds[sid] != "slack":
                    raise ContractViolation(f"constraint {con.origin!r} references non-slack id {sid}")
                var = self.variables[sid]
                free = var.lower == -math.inf and var.upper == math.inf
                lifting = var.lower == 0.0 and var.upper == math.inf and coef > 0 and con.sense != EQ
                if coef == 0 or not (free or lifting):
                    raise ContractViolation(f"slack {var.name} cannot relax constraint {con.origin!r}")
        users: dict[int, list[Constraint]] = {}
        for con in self.constraints:
            for sid, _ in con.slacks:
                users.setdefault(sid, []).append(con)
        for sid, cons in users.items():
            if len(cons) > 1 and any(c.sense == EQ for c in cons):
                raise ContractViolation(f"slack {self.variables[sid].name} is shared with an equality")
        for group in self.sos1:
            if any(not 0 <= i < nvar for i in group):
                raise ContractViolation(f"SOS-1 group {group} references unknown variables")
            binaries = [i for i in group if kinds[i] == "binary"]
            if binaries and (len(binaries) > 1 or len(group) != 2):
                raise ContractViolation(f"SOS-1 group {group}: a binary may only pair with one continuous variable")
        for card in self.cardinality:
            if any(not 0 <= i < nvar or kinds[i] != "binary" for i in card.members):
                raise ContractViolation(f"cardinality {card.members} must range over binaries")

    @property
    def num_decision(self) -> int:
        return sum(v.kind == "decision" for v in self.variables)

    @property
    def num_continuous(self) -> int:
        return sum(v.kind != "binary" for v in self.variables)

    def ids(self, kind: str) -> list[int]:
        return [i for i, v in enumerate(self.variables) if v.kind == kind]

    def stats(self) -> dict[str, int]:
        return {
            "decision": self.num_decision,
            "slacks": len(self.ids("slack")),
            "nonnegative_slacks": sum(v.kind == "slack" and v.lower == 0.0 for v in self.variables),
            "binaries": len(self.ids("binary")),
            "constraints": len(self.constraints),
            "strict": sum(c.sense == GT for c in self.constraints),
            "equalities": sum(c.sense == EQ for c in self.constraints),
            "sos1": len(self.sos1),
            "cardinality": len(self.cardinality),
        }

    # -- serialization --

    def to_dict(self) -> dict:
        def bound(v):
            return None if math.isinf(v) else v

        return {
            "format": FORMAT_SYSTEM,
            "variables": [
                {"id": i, "name": v.name, "kind": v.kind, "lower": bound(v.lower),
                 "upper": bound(v.upper), "origin": v.origin}
                for i, v in enumerate(self.variables)
            ],
            "constraints": [
                {"id": i, "coeffs": list(c.coeffs), "constant": c.constant, "sense": c.sense,
                 "slacks": [[sid, coef] for sid, coef in c.slacks], "origin": c.origin}
                for i, c in enumerate(self.constraints)
            ],
            "sos1": [list(g) for g in self.sos1],
            "cardinality": [{"members": list(c.members), "at_least": c.at_least} for c in self.cardinality],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConstraintSystem":
        if data.get("format") != FORMAT_SYSTEM:
            raise ContractViolation(f"unsupported document format {data.get('format')!r}")
        variables = tuple(
            Variable(v["name"], v["kind"],
                     -math.inf if v["lower"] is None else float(v["lower"]),
                     math.inf if v["upper"] is None else float(v["upper"]), v.get("origin", ""))
            for v in data["variables"]
        )
        constraints = tuple(
            Constraint(tuple(c["coeffs"]), float(c["constant"]), c["sense"],
                       tuple((int(s), float(k)) for s, k in c["slacks"]), c.get("origin", ""))
            for c in data["constraints"]
        )
        return cls(variables, constraints, tuple(tuple(g) for g in data["sos1"]),
                   tuple(Cardinality(tuple(c["members"]), int(c["at_least"])) for c in data["cardinality"]))

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "ConstraintSystem":
        return cls.from_dict(json.loads(text))


class _Builder:
    def __init__(self, num_decision, names, bounds):
        names = names or [f"z{i}" for i in range(num_decision)]
        bounds = bounds or [(-math.inf, math.inf)] * num_decision
        if len(names) != num_decision or len(bounds) != num_decision:
            raise ContractViolation("decision names/bounds do not match the decision dimension")
        self.variables = [Variable(n, "decision", float(lo), float(hi)) for n, (lo, hi) in zip(names, bounds)]
        self.constraints: list[Constraint] = []
        self.sos1: list[tuple[int, ...]] = []
        self.cardinality: list[Cardinality] = []
        self.counts = {"slack": 0, "binary": 0}

    def new(self, kind, lower, upper, origin) -> int:
        prefix = "s" if kind == "slack" else "b"
        name = f"{prefix}{self.counts[kind]}"
        self.counts[kind] += 1
        self.variables.append(Variable(name, kind, lower, upper, origin))
        return len(self.variables) - 1

    def emit(self, f: Formula, relax: tuple[tuple[int, float, int | None], ...], path: str):
        # relax holds (slack id, coefficient, owning binary or None) per enclosing disjunction
        if isinstance(f, Atom):
            coeffs, const, sense = _normalized(f.pred)
            if sense == EQ:
                if any(owner is None for _, _, owner in relax):
                    raise ContractViolation(f"{path}: equalities cannot sit under a slack-pair disjunction")
                # a shared slack cannot absorb an equality and an inequality at once
                fresh = []
                for _, coef, owner in relax:
                    t = self.new("slack", -math.inf, math.inf, path)
                    self.sos1.append((t, owner))
                    fresh.append((t, coef, owner))
                relax = tuple(fresh)
            self.constraints.append(Constraint(coeffs, const, sense, tuple((s, c) for s, c, _ in relax), path))
        elif isinstance(f, And):
            for i, a in enumerate(f.args):
                self.emit(a, relax, f"{path}/and[{i}]")
        elif isinstance(f, Or) and f.encoding == "binary":
            members = []
            for i, a in enumerate(f.args):
                here = f"{path}/or[{i}]"
                b = self.new("binary", 0.0, 1.0, here)
                t = self.new("slack", -math.inf, math.inf, here)
                self.sos1.append((t, b))
                members.append(b)
                self.emit(a, relax + ((t, -1.0, b),), here)
            self.cardinality.append(Cardinality(tuple(members), 1))
        elif isinstance(f, Or):
            pair = []
            for i, a in enumerate(f.args):
                here = f"{path}/pair[{i}]"
                s = self.new("slack", 0.0, math.inf, here)
                pair.append(s)
                self.emit(a, relax + ((s, 1.0, None),), here)
            self.sos1.append(tuple(pair))
        else:
            raise WrongVariantError(f"formula not in negation normal form at {path}")

    def build(self) -> ConstraintSystem:
        return ConstraintSystem(tuple(self.variables), tuple(self.constraints), tuple(self.sos1),
                                tuple(self.cardinality))


def compile_formula(formula, num_decision: int | None = None, *, names: Sequence[str] | None = None,
                    bounds: Sequence[tuple[float, float]] | None = None) -> ConstraintSystem:
    """Compile a formula into a :class:`ConstraintSystem`.

    Variable naming is deterministic (``s0, s1, ...``, ``b0, b1, ...`` in
    depth-first order), so compiling the same formula twice gives identical
    systems. Every auxiliary carries the path of the sub-formula that created
    it in ``origin``.
    """
    f = to_nnf(formula)
    dims = {p.dim for p in atoms(f)}
    if num_decision is None:
        if len(dims) != 1:
            raise ContractViolation(f"atoms disagree on the decision dimension: {sorted(dims)}")
        num_decision = dims.pop()
    elif dims - {num_decision}:
        raise ContractViolation(f"atoms have dimensions {sorted(dims)}, expected {num_decision}")
    builder = _Builder(num_decision, names, bounds)
    builder.emit(f, (), "root")
    return builder.build()


def disjunction(preds: Sequence[AffinePredicate], encoding: str = "binary") -> ConstraintSystem:
    """Fragment for ``p_1 or ... or p_N`` (one slack, binary and SOS-1 pair per operand)."""
    if not preds:
        raise ArityError("disjunction of zero predicates")
    return compile_formula(Or(tuple(Atom(p) for p in preds), encoding))


def conjunction(preds: Sequence[AffinePredicate]) -> ConstraintSystem:
    """Fragment for ``p_1 and ... and p_N``: the predicates as plain constraints."""
    if not preds:
        raise ArityError("conjunction of zero predicates")
    return compile_formula(And(tuple(Atom(p) for p in preds)))


def compile_piecewise(sys, spec, x, encoding: str = "selection") -> ConstraintSystem:
    """Constraints on ``u`` describing the safe input set of a piecewise barrier at ``x``.

    For each piece, the guard and body evaluated at the next state are affine
    in ``u``. With ``encoding="selection"`` the fragment is
    ``OR_j (guard_j AND body_j)`` with one slack shared by the guard and body
    of each piece. With ``encoding="implication"`` it is
    ``AND_j (guard_j -> body_j) AND OR_j guard_j``. The two agree when the
    guards partition the state space.
    """
    from .cbf import PiecewiseBarrier

    if not isinstance(spec, PiecewiseBarrier):
        raise WrongVariantError(f"piecewise barrier required, got {type(spec).__name__}")
    if spec.n1 != sys.n1:
        raise ContractViolation(f"barrier splits at n1={spec.n1}, system at n1={sys.n1}")
    f1, f2, g = sys.drift(x)
    guards, bodies = [], []
    for piece in spec.pieces:
        kappa = np.atleast_1d(np.asarray(piece.kappa(f1), dtype=float))
        mu = np.atleast_1d(np.asarray(piece.mu(f1), dtype=float))
        guards.append(AffinePredicate(kappa @ g, kappa @ f2 + float(piece.lam(f1)),
                                      LT if piece.strict_guard else LE))
        bodies.append(AffinePredicate(mu @ g, mu @ f2 + float(piece.nu(f1)), GE))
    names = [f"u{i}" for i in range(sys.m)]
    if encoding == "selection":
        formula = Or(tuple(And((gd, bd)) for gd, bd in zip(guards, bodies)))
    elif encoding == "implication":
        formula = And(tuple(if_then_else(gd, bd) for gd, bd in zip(guards, bodies)) + (Or(tuple(guards)),))
    else:
        raise ContractViolation(f"unknown piecewise encoding {encoding!r}")
    return compile_formula(formula, sys.m, names=names)


# --- branching semantics ----------------------------------------------------

@dataclass(frozen=True)
class BranchPoint:
    """A combinatorial choice of the system.

    ``kind == "binary"``: ``target`` is a binary id, options ``(1, 0)``.
    ``kind == "group"``: ``target`` indexes a binary-free SOS-1 group; option
    ``i`` lets member ``i`` be nonzero and pins the others to zero.

    Options are listed in branch order. Freeing the last member first keeps
    the first disjunct of a slack pair enforced first, matching the ``b = 1``
    first order of binaries.
    """

    kind: str
    target: int
    options: tuple[int, ...]


def branch_points(system: ConstraintSystem) -> list[BranchPoint]:
    """Branch points in a fixed order: binaries by id, then binary-free groups."""
    points = [BranchPoint("binary", b, (1, 0)) for b in system.ids("binary")]
    for gi, group in enumerate(system.sos1):
        if not any(system.variables[i].kind == "binary" for i in group):
            points.append(BranchPoint("group", gi, tuple(reversed(range(len(group))))))
    return points


@dataclass(frozen=True)
class Enforcement:
    """What a (partial) branch assignment implies."""

    enforced: np.ndarray          # bool per constraint
    pinned: frozenset[int]        # variable ids forced to zero
    binaries: dict[int, int]      # fixed binary values
    cardinality_ok: bool          # still satisfiable given the fixed binaries


def enforcement(system: ConstraintSystem, points: Sequence[BranchPoint],
                assignment: Sequence[int]) -> Enforcement:
    """Constraints enforced by the first ``len(assignment)`` branch decisions.

    A constraint is enforced when every slack in it is pinned to zero; a
    constraint with a free slack is dropped, since the slack can absorb any
    violation. Unassigned branch points pin nothing, which makes the result
    a valid relaxation of every completion.
    """
    binaries: dict[int, int] = {}
    pinned: set[int] = set()
    chosen_group: dict[int, int] = {}
    for point, option in zip(points, assignment):
        if point.kind == "binary":
            binaries[point.target] = option
        else:
            chosen_group[point.target] = option
    for gi, group in enumerate(system.sos1):
        bins = [i for i in group if system.variables[i].kind == "binary"]
        if bins:
            if binaries.get(bins[0]) == 1:
                pinned.update(i for i in group if i != bins[0])
        elif gi in chosen_group:
            keep = group[chosen_group[gi]]
            pinned.update(i for i in group if i != keep)
    enforced = np.array([all(s in pinned for s, _ in c.slacks) for c in system.constraints], dtype=bool)
    ok = True
    for card in system.cardinality:
        possible = sum(binaries.get(b, 1) for b in card.members)
        ok &= possible >= card.at_least
    return Enforcement(enforced, frozenset(pinned), binaries, ok)


def _freeing_conditions(system: ConstraintSystem) -> list[dict]:
    """Per variable, the branch decisions that leave it free to be nonzero.

    Keys are ``("binary", id)`` or ``("group", index)``; an empty dict means
    no SOS-1 group restricts the variable.
    """
    conds: list[dict] = [{} for _ in system.variables]
    for gi, group in enumerate(system.sos1):
        bins = [i for i in group if system.variables[i].kind == "binary"]
        for pos, i in enumerate(group):
            if bins and i != bins[0]:
                conds[i][("binary", bins[0])] = 0
            elif not bins:
                conds[i][("group", gi)] = pos
    return conds


def completion_exists(system: ConstraintSystem, points, eps_strict: float = EPS_STRICT,
                      eq_tol: float = 1e-12, max_nodes: int = 1 << 20) -> np.ndarray:
    """For each decision point, whether slacks and binaries exist satisfying the system.

    At a fixed point every constraint is either satisfied outright or needs
    one of its slacks left free, and a slack is free exactly when the branch
    decisions of its SOS-1 groups allow it. The search picks an unmet
    requirement, tries each way of freeing one of its slacks, and prunes on
    the cardinality rows. Decisions nothing depends on are completed with
    binaries at 1, which can only help the cardinality rows.
    ``max_nodes`` bounds the search per point.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != system.num_decision:
        raise ContractViolation(f"points have dimension {pts.shape[1]}, expected {system.num_decision}")
    d = system.num_decision
    sat = np.ones((len(system.constraints), len(pts)), dtype=bool)
    for k, con in enumerate(system.constraints):
        v = con.value(pts)
        if con.sense == GE:
            sat[k] = v >= 0
        elif con.sense == GT:
            sat[k] = v >= eps_strict
        else:
            sat[k] = np.abs(v) <= eq_tol * (1.0 + abs(con.constant))
    lower = np.array([v.lower for v in system.variables[:d]])
    upper = np.array([v.upper for v in system.variables[:d]])
    in_box = np.all((pts >= lower) & (pts <= upper), axis=1)
    conds = _freeing_conditions(system)
    cards = [(card.members, card.at_least) for card in system.cardinality]

    def cardinality_possible(assign):
        return all(sum(assign.get(("binary", b), 1) for b in members) >= need for members, need in cards)

    def status(var, assign):
        # True: free, False: pinned, None: undecided
        undecided = False
        for key, want in conds[var].items():
            got = assign.get(key)
            if got is None:
                undecided = True
            elif got != want:
                return False
        return None if undecided else True

    def point_feasible(requirements):
        nodes = 0

        def search(assign):
            nonlocal nodes
            nodes += 1
            if nodes > max_nodes:
                raise ResourceLimitError(f"feasibility search exceeded {max_nodes} nodes")
            if not cardinality_possible(assign):
                return False
            open_req = None
            for req in requirements:
                states = [status(v, assign) for v in req]
                if any(st is True for st in states):
                    continue
                if all(st is False for st in states):
                    return False
                if open_req is None:
                    open_req = [v for v, st in zip(req, states) if st is None]
            if open_req is None:
                return True
            for var in open_req:
                extra = {key: want for key, want in conds[var].items() if key not in assign}
                if search({**assign, **extra}):
                    return True
            return False

        return search({})

    found = np.zeros(len(pts), dtype=bool)
    for j in np.flatnonzero(in_box):
        # every violated constraint needs a free slack; nonzero grouped
        # decision variables need to be free themselves
        reqs = [tuple(sv for sv, _ in system.constraints[k].slacks) for k in np.flatnonzero(~sat[:, j])]
        reqs += [(i,) for i in range(d) if pts[j, i] != 0 and conds[i]]
        found[j] = point_feasible(reqs)
    return found
