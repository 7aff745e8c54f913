"""Lateral vehicle model, lane-keeping barrier and the LK / OA controller problems.

The lateral state is ``x = (y, nu, psi, r)``: displacement from the lane
centre, lateral velocity, yaw angle relative to the lane and yaw rate. The
road enters as a known yaw-rate disturbance ``rd = V0 / R``. The model is the
forward-Euler discretization ``x+ = Ad x + Bd u + Ed rd``.

The barrier ``h_lk(y, v)`` uses the instantaneous lateral velocity
``v = nu + V0 psi`` and keeps enough room to stop before ``|y| = y_max``
under the acceleration bound ``a_max``.
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .cbf import BlackBoxBarrier, Piece, PiecewiseBarrier, PartiallyAffineSystem, SearchResult
from .errors import ContractViolation, ControllabilityError, UnsafeStateError
from .micp import (EQ, GE, GT, AffinePredicate, And, Atom, Formula, Or, compile_formula)
from .miqp import MiqpProblem, QuadraticObjective, solve_miqp

DEFAULT_POLES = (0.95, 0.8, 0.85, 0.9)
DECISION_NAMES = ("u", "delta")
# tolerance for rounding in the square-root arguments of the stopping distance
SQRT_ROUNDOFF = 1e-12


@dataclass(frozen=True)
class VehicleParams:
    """Vehicle and controller constants (SI units).

    ``a_max`` defaults to ``0.3 * g``.
    """

    V0: float = 8.33
    Cf: float = 133000.0
    Cr: float = 98800.0
    M: float = 1650.0
    a: float = 1.11
    b: float = 1.59
    Iz: float = 2315.3
    g: float = 9.81
    a_max: float | None = None
    y_max: float = 0.9
    ts: float = 0.01

    def __post_init__(self):
        if self.a_max is None:
            object.__setattr__(self, "a_max", 0.3 * self.g)
        for f in fields(self):
            value = getattr(self, f.name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ContractViolation(f"{f.name} must be a positive finite number, got {value!r}")
            object.__setattr__(self, f.name, float(value))
        if self.a_max > self.g:
            raise ContractViolation(f"a_max={self.a_max} exceeds g={self.g}")

    def replace(self, **changes) -> "VehicleParams":
        data = asdict(self)
        data.update(changes)
        return VehicleParams(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "VehicleParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractViolation(f"unknown vehicle parameters: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "VehicleParams":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class LateralState:
    y: float = 0.0
    nu: float = 0.0
    psi: float = 0.0
    r: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            value = float(getattr(self, f.name))
            if not math.isfinite(value):
                raise ContractViolation(f"{f.name} must be finite, got {value}")
            object.__setattr__(self, f.name, value)

    def as_array(self) -> np.ndarray:
        return np.array([self.y, self.nu, self.psi, self.r])

    @classmethod
    def from_array(cls, x) -> "LateralState":
        x = _state(x)
        return cls(*x)

    def lateral_velocity(self, p: VehicleParams) -> float:
        return self.nu + p.V0 * self.psi


def _state(x) -> np.ndarray:
    if isinstance(x, LateralState):
        return x.as_array()
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (4,):
        raise ContractViolation(f"lateral state needs 4 components, got {x.shape[0]}")
    return x


def lateral_velocity(p: VehicleParams, x) -> float:
    x = _state(x)
    return float(x[1] + p.V0 * x[2])


# --- model ------------------------------------------------------------------

@dataclass(frozen=True)
class VehicleMatrices:
    A: np.ndarray
    B: np.ndarray
    E: np.ndarray
    Ad: np.ndarray
    Bd: np.ndarray
    Ed: np.ndarray


@functools.lru_cache(maxsize=32)
def build_matrices(p: VehicleParams) -> VehicleMatrices:
    """Continuous matrices ``A, B, E`` and their Euler discretization."""
    V0, Cf, Cr, M, a, b, Iz = p.V0, p.Cf, p.Cr, p.M, p.a, p.b, p.Iz
    A = np.array([
        [0.0, 1.0, V0, 0.0],
        [0.0, -(Cf + Cr) / (M * V0), 0.0, (b * Cr - a * Cf) / (M * V0) - V0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, (b * Cr - a * Cf) / (Iz * V0), 0.0, -(a * a * Cf + b * b * Cr) / (Iz * V0)],
    ])
    B = np.array([0.0, Cf / M, 0.0, a * Cf / Iz])
    E = np.array([0.0, 0.0, -1.0, 0.0])
    mats = VehicleMatrices(A, B, E, np.eye(4) + A * p.ts, B * p.ts, E * p.ts)
    for m in (mats.A, mats.B, mats.E, mats.Ad, mats.Bd, mats.Ed):
        m.flags.writeable = False
    return mats


def step_vehicle(p: VehicleParams, x, u: float, rd: float) -> np.ndarray:
    m = build_matrices(p)
    return m.Ad @ _state(x) + m.Bd * float(u) + m.Ed * float(rd)


def _alpha(p: VehicleParams) -> float:
    return -(p.Cf + p.Cr) / (p.M * p.V0)


def _beta(p: VehicleParams) -> float:
    return (p.b * p.Cr - p.a * p.Cf) / (p.M * p.V0) - p.V0


def input_gain(p: VehicleParams) -> float:
    """Effect of ``u`` on the next lateral velocity, ``ts * Cf / M``."""
    return p.ts * p.Cf / p.M


def map_reduced(p: VehicleParams, x) -> tuple[PartiallyAffineSystem, np.ndarray]:
    """Two-state system in ``(y, nu)`` with ``psi`` and ``r`` frozen at their values in ``x``.

    Stepping it reproduces the ``y`` and ``nu`` rows of :func:`step_vehicle`
    for the same ``u``.
    """
    x = _state(x)
    psi, r = float(x[2]), float(x[3])
    ts, V0 = p.ts, p.V0
    alpha, beta, c = _alpha(p), _beta(p), input_gain(p)
    system = PartiallyAffineSystem(
        1, 1, 1,
        f1=lambda z: np.array([z[0] + ts * z[1] + ts * V0 * psi]),
        f2=lambda z: np.array([z[1] + ts * alpha * z[1] + ts * beta * r]),
        g=lambda z: np.array([[c]]),
    )
    return system, x[:2].copy()


# the full model as a partially control affine system needs the unactuated
# coordinates first: (y, psi, nu, r)
FULL_ORDER = (0, 2, 1, 3)


def to_full_order(x) -> np.ndarray:
    return _state(x)[list(FULL_ORDER)]


def from_full_order(z) -> np.ndarray:
    return np.asarray(z, dtype=float)[list(FULL_ORDER)]


def full_system(p: VehicleParams, rd: float = 0.0) -> PartiallyAffineSystem:
    """The 4-state model in ``(y, psi, nu, r)`` order with a constant road rate."""
    m = build_matrices(p)
    order = list(FULL_ORDER)
    Ad = m.Ad[np.ix_(order, order)]
    drift_offset = (m.Ed * rd)[order]
    Bd = m.Bd[order]

    def f(z):
        return Ad @ z + drift_offset

    return PartiallyAffineSystem(2, 2, 1, f1=lambda z: f(z)[:2], f2=lambda z: f(z)[2:],
                                 g=lambda z: Bd[2:].reshape(2, 1))


# --- acceleration constraint ------------------------------------------------

def compute_f0(p: VehicleParams, nu: float, r: float, rd: float) -> float:
    return p.Cf * (nu + p.a * r) / p.V0 + p.Cr * (nu - p.b * r) / p.V0 + p.M * p.V0 * rd


def lateral_acceleration(p: VehicleParams, x, u: float, rd: float) -> float:
    """``a_k = (-F0 + Cf u) / M``, the second difference of ``y`` over ``ts^2``."""
    x = _state(x)
    return (-compute_f0(p, x[1], x[3], rd) + p.Cf * float(u)) / p.M


@dataclass(frozen=True)
class AccelBox:
    """Inputs with ``|a_k| <= a_max``: ``lower <= u <= upper``."""

    lower: float
    upper: float

    @property
    def feasible(self) -> bool:
        return self.lower <= self.upper

    def clip(self, u: float) -> float:
        return float(min(max(u, self.lower), self.upper))


def accel_constraint(p: VehicleParams, f0: float) -> AccelBox:
    return AccelBox((f0 - p.M * p.a_max) / p.Cf, (p.M * p.a_max + f0) / p.Cf)


def accel_predicates(p: VehicleParams, f0: float) -> tuple[AffinePredicate, AffinePredicate]:
    """The two halves of the acceleration box as predicates over ``(u, delta)``."""
    box = accel_constraint(p, f0)
    return (AffinePredicate((-1.0, 0.0), box.upper, GE),
            AffinePredicate((1.0, 0.0), -box.lower, GE))


# --- lane-keeping barrier ---------------------------------------------------

def _direction(v):
    return np.where(np.asarray(v) >= 0, 1.0, -1.0)


def _stop_margin(p: VehicleParams, y, v, ts):
    return 2.0 * p.a_max * (p.y_max - _direction(v) * np.asarray(y, dtype=float)) + (0.5 * p.a_max * ts) ** 2


def h_lk(p: VehicleParams, y, v):
    """Lane-keeping barrier; ``sgn(0) = +1``.

    Raises :class:`UnsafeStateError` where the square root is undefined
    (the state already moves beyond the lane edge).
    """
    arg = _stop_margin(p, y, v, p.ts)
    if np.any(arg < 0):
        bad = np.flatnonzero(np.atleast_1d(arg) < 0)[0]
        raise UnsafeStateError(np.atleast_1d(y)[bad] if np.ndim(y) else y,
                               np.atleast_1d(v)[bad] if np.ndim(v) else v)
    out = np.sqrt(arg) - np.abs(v) - 0.5 * p.a_max * p.ts
    return float(out) if np.ndim(out) == 0 else out


def h_lk_extended(p: VehicleParams, y, v):
    """:func:`h_lk` continued past its domain as ``-sqrt(-arg)``; negative there.

    Used for monitoring lanes the vehicle has left.
    """
    arg = _stop_margin(p, y, v, p.ts)
    out = np.sign(arg) * np.sqrt(np.abs(arg)) - np.abs(v) - 0.5 * p.a_max * p.ts
    return float(out) if np.ndim(out) == 0 else out


def h_lk_continuous_limit(p: VehicleParams, y, v):
    """The ``ts -> 0`` limit of :func:`h_lk`: ``sqrt(2 a_max (y_max - sgn(v) y)) - |v|``."""
    arg = 2.0 * p.a_max * (p.y_max - _direction(v) * np.asarray(y, dtype=float))
    if np.any(arg < 0):
        bad = np.flatnonzero(np.atleast_1d(arg) < 0)[0]
        raise UnsafeStateError(np.atleast_1d(y)[bad] if np.ndim(y) else y,
                               np.atleast_1d(v)[bad] if np.ndim(v) else v)
    out = np.sqrt(arg) - np.abs(v)
    return float(out) if np.ndim(out) == 0 else out


def lk_barrier(p: VehicleParams) -> BlackBoxBarrier:
    """``h_lk`` on the full state in ``(y, psi, nu, r)`` order."""
    return BlackBoxBarrier(lambda z: h_lk_extended(p, z[0], z[2] + p.V0 * z[1]))


def _eta(p: VehicleParams, y1: float, side: float) -> float | None:
    c = 0.5 * p.a_max * p.ts
    arg = 2.0 * p.a_max * (p.y_max - side * y1) + c * c
    if arg < 0:
        if arg < -SQRT_ROUNDOFF:
            return None
        arg = 0.0
    return math.sqrt(arg) - c


@dataclass(frozen=True)
class LanePreview:
    """One-step preview of the quantities in the lane-keeping input constraints.

    ``v_next = z + input_gain * u`` is the lateral velocity after the step,
    ``eta_plus`` / ``eta_minus`` the allowed speed toward the left / right
    edge from ``y_next`` (``None`` when ``y_next`` is already beyond it).
    """

    y_next: float
    psi_next: float
    z: float
    eta_plus: float | None
    eta_minus: float | None


def lane_preview(p: VehicleParams, x, rd: float) -> LanePreview:
    y, nu, psi, r = _state(x)
    y1 = y + p.ts * (nu + p.V0 * psi)
    psi1 = psi + p.ts * (r - rd)
    z = p.V0 * psi1 + (1.0 + p.ts * _alpha(p)) * nu + p.ts * _beta(p) * r
    return LanePreview(float(y1), float(psi1), float(z), _eta(p, y1, 1.0), _eta(p, y1, -1.0))


_NEVER = AffinePredicate((0.0, 0.0), -1.0, GE)


def lc_cbf_formula(p: VehicleParams, x, rd: float) -> Formula:
    """``h_lk`` at the next state is non-negative, as a formula over ``(u, delta)``.

    Two pieces joined by a slack pair: moving left (``v_next >= 0``) within
    ``eta_plus``, or moving right (``v_next < 0``) within ``eta_minus``. A
    piece whose edge has already been crossed is replaced by an unsatisfiable
    atom.
    """
    pre = lane_preview(p, x, rd)
    if pre.eta_plus is None and pre.eta_minus is None:
        raise UnsafeStateError(pre.y_next, pre.z)
    c, z = input_gain(p), pre.z
    if pre.eta_plus is None:
        left = And((Atom(_NEVER), Atom(_NEVER)))
    else:
        left = And((Atom(AffinePredicate((-c, 0.0), pre.eta_plus - z, GE)),
                    Atom(AffinePredicate((c, 0.0), z, GE))))
    if pre.eta_minus is None:
        right = And((Atom(_NEVER), Atom(_NEVER)))
    else:
        right = And((Atom(AffinePredicate((c, 0.0), pre.eta_minus + z, GE)),
                     Atom(AffinePredicate((-c, 0.0), -z, GT))))
    return Or((left, right), encoding="slack")


def lc_cbf_fragment(p: VehicleParams, x, rd: float):
    """:func:`lc_cbf_formula` compiled: 4 constraints, 2 non-negative slacks, 1 SOS-1 pair."""
    return compile_formula(lc_cbf_formula(p, x, rd), 2, names=DECISION_NAMES)


def next_barrier(p: VehicleParams, x, u: float, rd: float) -> float:
    """``h_lk`` after applying ``u`` for one step, from the stepped model.

    The next lateral velocity is the difference quotient of the next two
    displacements, both obtained by stepping the full model.
    """
    x1 = step_vehicle(p, x, u, rd)
    y2 = float(build_matrices(p).Ad[0] @ x1)
    return h_lk_extended(p, x1[0], (y2 - x1[0]) / p.ts)


def lk_piecewise_barrier(p: VehicleParams, psi_next: float) -> PiecewiseBarrier:
    """``h_lk`` on the reduced state ``(y, nu)`` for a known next yaw angle.

    Piece 0 covers ``v >= 0``, piece 1 covers ``v < 0``, where
    ``v = nu + V0 * psi_next``.
    """
    offset = p.V0 * psi_next

    def eta(side):
        def nu_fn(x1):
            e = _eta(p, float(x1[0]), side)
            return -math.inf if e is None else e - side * offset
        return nu_fn

    moving_left = Piece(mu=lambda x1: np.array([-1.0]), nu=eta(1.0),
                        kappa=lambda x1: np.array([-1.0]), lam=lambda x1: -offset)
    moving_right = Piece(mu=lambda x1: np.array([1.0]), nu=eta(-1.0),
                         kappa=lambda x1: np.array([1.0]), lam=lambda x1: offset, strict_guard=True)
    return PiecewiseBarrier(1, (moving_left, moving_right))


# --- feedback gain and cost -------------------------------------------------

def pole_place(Ad, Bd, poles) -> np.ndarray:
    """State-feedback gain ``K`` with ``eig(Ad - Bd K)`` equal to ``poles`` (Ackermann).

    Single input only. Raises :class:`ControllabilityError` when the
    controllability matrix is singular or its condition number exceeds 1e12.
    """
    Ad = np.atleast_2d(np.asarray(Ad, dtype=float))
    n = Ad.shape[0]
    Bd = np.asarray(Bd, dtype=float).reshape(n)
    poles = np.asarray(poles, dtype=complex).reshape(-1)
    if poles.shape[0] != n:
        raise ContractViolation(f"need {n} poles, got {poles.shape[0]}")
    ctrb = np.empty((n, n))
    col = Bd.copy()
    for i in range(n):
        ctrb[:, i] = col
        col = Ad @ col
    cond = np.linalg.cond(ctrb)
    if not np.isfinite(cond) or cond > 1e12:
        raise ControllabilityError(f"controllability matrix condition number {cond:.3g}")
    # sorting makes the gain independent of the order the poles are listed in
    poles = np.array(sorted(poles, key=lambda z: (z.real, z.imag)))
    coeffs = np.poly(poles)
    if np.max(np.abs(coeffs.imag)) > 1e-9:
        raise ContractViolation("complex poles must come in conjugate pairs")
    coeffs = coeffs.real
    phi = np.zeros((n, n))
    for c in coeffs:
        phi = phi @ Ad + c * np.eye(n)
    last = np.zeros(n)
    last[-1] = 1.0
    return np.linalg.solve(ctrb.T, last) @ phi


@dataclass(frozen=True)
class LkGainAndCost:
    """Legacy feedback gain and the quadratic cost over ``(u, delta)``.

    The default ``H = [[1, -1], [-1, 100]]`` equals ``(u - delta)^2 +
    99 delta^2``; along the feedback equality ``u - delta`` is the legacy
    input, so ``delta`` is exactly zero whenever no safety constraint binds.
    The weight on ``delta`` is ``H[1, 1] = 100``.
    """

    K: np.ndarray
    poles: tuple[float, ...] = DEFAULT_POLES
    H: np.ndarray = field(default_factory=lambda: np.array([[1.0, -1.0], [-1.0, 100.0]]))
    F: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "K", np.asarray(self.K, dtype=float).reshape(4))
        object.__setattr__(self, "H", np.asarray(self.H, dtype=float).reshape(2, 2))
        object.__setattr__(self, "F", np.asarray(self.F, dtype=float).reshape(2))
        QuadraticObjective(self.H, self.F)

    @property
    def delta_weight(self) -> float:
        return float(self.H[1, 1])

    @classmethod
    def design(cls, p: VehicleParams, poles=DEFAULT_POLES, H=None, F=None) -> "LkGainAndCost":
        m = build_matrices(p)
        K = pole_place(m.Ad, m.Bd, poles)
        kwargs = {}
        if H is not None:
            kwargs["H"] = H
        if F is not None:
            kwargs["F"] = F
        return cls(K, tuple(float(q) for q in poles), **kwargs)

    def legacy_input(self, x, rd: float) -> float:
        x = _state(x)
        return float(-self.K @ (x - np.array([0.0, 0.0, 0.0, rd])))

    def to_dict(self) -> dict:
        return {"K": self.K.tolist(), "poles": list(self.poles), "H": self.H.tolist(), "F": self.F.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "LkGainAndCost":
        return cls(np.array(data["K"]), tuple(data["poles"]), np.array(data["H"]), np.array(data["F"]))


def feedback_predicate(gains: LkGainAndCost, x, rd: float) -> AffinePredicate:
    """``u = -K (x - x_ff) + delta`` with ``x_ff = (0, 0, 0, rd)``."""
    x = _state(x)
    offset = float(gains.K @ (x - np.array([0.0, 0.0, 0.0, rd])))
    return AffinePredicate((1.0, -1.0), offset, EQ)


# --- controller problems ----------------------------------------------------

def _lane_formula(p: VehicleParams, x, rd: float) -> Formula:
    x = _state(x)
    upper, lower = accel_predicates(p, compute_f0(p, x[1], x[3], rd))
    return And((Atom(upper), Atom(lower), lc_cbf_formula(p, x, rd)))


def _objective(gains: LkGainAndCost) -> QuadraticObjective:
    return QuadraticObjective(gains.H, gains.F)


def build_lk_miqp(p: VehicleParams, gains: LkGainAndCost, x, rd: float) -> MiqpProblem:
    """Lane keeping: acceleration box, next-step barrier and soft legacy feedback.

    Constraint order: the two acceleration bounds, the four barrier
    constraints, then the feedback equality.
    """
    formula = And((_lane_formula(p, x, rd), Atom(feedback_predicate(gains, x, rd))))
    return MiqpProblem(_objective(gains), compile_formula(formula, 2, names=DECISION_NAMES))


def build_oa_miqp(p: VehicleParams, gains: LkGainAndCost, x, rd1: float, rd2: float,
                  feedback: str = "shared") -> MiqpProblem:
    """Obstacle avoidance: stay in lane 1 or in lane 2.

    ``x`` is either one lateral state (both lanes still coincide) or a pair
    of lane-relative states. Each lane contributes its acceleration box and
    barrier constraints under its own road rate, and the two lanes are joined
    by a binary disjunction.

    ``feedback="shared"`` tracks lane 1 with a single feedback equality;
    ``feedback="per-lane"`` places each lane's own feedback equality inside
    its disjunct.
    """
    arr = np.asarray(x.as_array() if isinstance(x, LateralState) else x, dtype=float)
    if arr.ndim == 1:
        x1 = x2 = _state(arr)
    else:
        if arr.shape != (2, 4):
            raise ContractViolation(f"expected one state or a pair of states, got shape {arr.shape}")
        x1, x2 = arr
    lanes = []
    for x_lane, rd in ((x1, rd1), (x2, rd2)):
        try:
            lanes.append(_lane_formula(p, x_lane, rd))
        except UnsafeStateError:
            # this lane is already lost; its disjunct can never be selected
            lanes.append(Atom(_NEVER))
    if all(isinstance(lane, Atom) for lane in lanes):
        raise UnsafeStateError(x1[0], lateral_velocity(p, x1), "both lanes are beyond recovery")
    if feedback == "shared":
        formula = And((Or(tuple(lanes)), Atom(feedback_predicate(gains, x1, rd1))))
    elif feedback == "per-lane":
        formula = Or((And((lanes[0], Atom(feedback_predicate(gains, x1, rd1)))),
                      And((lanes[1], Atom(feedback_predicate(gains, x2, rd2))))))
    else:
        raise ContractViolation(f"unknown feedback mode {feedback!r}")
    return MiqpProblem(_objective(gains), compile_formula(formula, 2, names=DECISION_NAMES))


def chosen_lane(solution) -> int | None:
    """Index (0 or 1) of the lane selected by an OA solution's binaries.

    When both binaries are set (both lanes' constraints hold) lane 0 is
    reported.
    """
    if not solution.optimal:
        return None
    bins = [solution.binaries[name] for name in sorted(solution.binaries, key=lambda s: int(s[1:]))]
    return 0 if bins[0] == 1 else 1


def lk_input_search(p: VehicleParams, gains: LkGainAndCost, rd: float = 0.0):
    """Input search for invariance checks on the full model in ``(y, psi, nu, r)`` order.

    Solves the LK problem at each state; infeasibility of that problem is
    exact, so a miss certifies that no admissible input keeps the barrier
    non-negative.
    """
    def search(sys, spec, z):
        x = from_full_order(z)
        try:
            problem = build_lk_miqp(p, gains, x, rd)
        except UnsafeStateError:
            return SearchResult(None, certified_empty=True)
        sol = solve_miqp(problem)
        if not sol.optimal:
            return SearchResult(None, certified_empty=True)
        return SearchResult(np.array([sol.u[0]]))

    return search
