"""Partially control affine systems and discrete-time control barrier functions.

A partially control affine system splits its state into an autonomous part
``x1`` and an actuated part ``x2``::

    x1+ = f1(x)
    x2+ = f2(x) + g(x) u

A barrier ``h`` defines the safe set ``{x : h(x) >= 0}`` and the one-step
safe input set ``K(x) = {u in U : h(step(x, u)) >= 0}``. When ``h`` is affine
in ``x2`` with coefficients depending on ``x1`` only, ``h(step(x, u))`` is
affine in ``u`` and ``K(x)`` is a half-space intersected with ``U``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (ContractViolation, DomainError, InputBoundsError,
                     NoActivePieceError, WrongVariantError)
from .qp import solve_qp


def _vec(v, name="vector") -> np.ndarray:
    out = np.atleast_1d(np.asarray(v, dtype=float))
    if out.ndim != 1:
        raise ContractViolation(f"{name} must be one-dimensional, got shape {out.shape}")
    return out


@dataclass(frozen=True)
class PartiallyAffineSystem:
    """Discrete-time dynamics ``[f1(x); f2(x) + g(x) u]`` with an input box."""

    n1: int
    n2: int
    m: int
    f1: Callable[[np.ndarray], np.ndarray]
    f2: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    input_lower: tuple[float, ...] | None = None
    input_upper: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n1 < 0 or self.n2 < 1 or self.m < 1:
            raise ContractViolation(f"need n1 >= 0, n2 >= 1, m >= 1 (got {self.n1}, {self.n2}, {self.m})")
        lo = (-np.inf,) * self.m if self.input_lower is None else tuple(float(v) for v in self.input_lower)
        hi = (np.inf,) * self.m if self.input_upper is None else tuple(float(v) for v in self.input_upper)
        if len(lo) != self.m or len(hi) != self.m:
            raise ContractViolation("input box must have one bound pair per input")
        if any(a > b for a, b in zip(lo, hi)):
            raise ContractViolation("input box lower bound exceeds upper bound")
        object.__setattr__(self, "input_lower", lo)
        object.__setattr__(self, "input_upper", hi)

    @property
    def n(self) -> int:
        return self.n1 + self.n2

    def split(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = self.check_state(x)
        return x[:self.n1], x[self.n1:]

    def check_state(self, x) -> np.ndarray:
        x = _vec(x, "state")
        if x.shape[0] != self.n:
            raise ContractViolation(f"state has dimension {x.shape[0]}, expected {self.n}")
        return x

    def check_input(self, u) -> np.ndarray:
        u = _vec(u, "input")
        if u.shape[0] != self.m:
            raise ContractViolation(f"input has dimension {u.shape[0]}, expected {self.m}")
        return u

    def in_box(self, u) -> bool:
        u = self.check_input(u)
        return bool(np.all(u >= np.asarray(self.input_lower)) and np.all(u <= np.asarray(self.input_upper)))

    def drift(self, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(f1(x), f2(x), g(x))`` with shapes checked."""
        x = self.check_state(x)
        f1 = _vec(self.f1(x), "f1(x)") if self.n1 else np.zeros(0)
        f2 = _vec(self.f2(x), "f2(x)")
        g = np.asarray(self.g(x), dtype=float).reshape(self.n2, self.m)
        if f1.shape[0] != self.n1 or f2.shape[0] != self.n2:
            raise ContractViolation("f1/f2 returned vectors of the wrong dimension")
        return f1, f2, g


def step(sys: PartiallyAffineSystem, x, u, *, check_bounds=True) -> np.ndarray:
    """One step of the dynamics.

    Raises :class:`InputBoundsError` when ``u`` is outside the input box,
    unless ``check_bounds`` is false.
    """
    u = sys.check_input(u)
    if check_bounds and not sys.in_box(u):
        raise InputBoundsError(f"input {u} outside box [{sys.input_lower}, {sys.input_upper}]")
    f1, f2, g = sys.drift(x)
    return np.concatenate([f1, f2 + g @ u])


# --- barriers -------------------------------------------------------------

@dataclass(frozen=True)
class BlackBoxBarrier:
    """Arbitrary scalar barrier ``h(x)``."""

    h: Callable[[np.ndarray], float]


@dataclass(frozen=True)
class AffineBarrier:
    """``h(x) = mu(x1) @ x2 + nu(x1)``; ``n1`` fixes where ``x`` is split."""

    n1: int
    mu: Callable[[np.ndarray], np.ndarray]
    nu: Callable[[np.ndarray], float]


@dataclass(frozen=True)
class Piece:
    """One piece ``mu(x1) x2 + nu(x1)`` valid where ``kappa(x1) x2 + lam(x1) <= 0``.

    With ``strict_guard`` the guard reads ``< 0`` instead.
    """

    mu: Callable[[np.ndarray], np.ndarray]
    nu: Callable[[np.ndarray], float]
    kappa: Callable[[np.ndarray], np.ndarray]
    lam: Callable[[np.ndarray], float]
    strict_guard: bool = False


@dataclass(frozen=True)
class PiecewiseBarrier:
    n1: int
    pieces: tuple[Piece, ...]

    def __post_init__(self):
        object.__setattr__(self, "pieces", tuple(self.pieces))
        if not self.pieces:
            raise ContractViolation("piecewise barrier needs at least one piece")


BarrierSpec = BlackBoxBarrier | AffineBarrier | PiecewiseBarrier


def _affine_value(mu, nu, x1, x2) -> float:
    return float(_vec(mu(x1)) @ x2 + float(nu(x1)))


def _guard_holds(piece: Piece, x1, x2) -> bool:
    value = _affine_value(piece.kappa, piece.lam, x1, x2)
    return value < 0 if piece.strict_guard else value <= 0


def active_piece(spec: PiecewiseBarrier, x) -> int:
    """Index of the first piece whose guard holds at ``x``."""
    x = _vec(x, "state")
    x1, x2 = x[:spec.n1], x[spec.n1:]
    for j, piece in enumerate(spec.pieces):
        if _guard_holds(piece, x1, x2):
            return j
    raise NoActivePieceError(f"no guard holds at x={x}")


def barrier_value(spec: BarrierSpec, x) -> float:
    """Evaluate ``h(x)``. Piecewise barriers use the lowest-index active piece."""
    x = _vec(x, "state")
    if isinstance(spec, BlackBoxBarrier):
        return float(spec.h(x))
    if isinstance(spec, AffineBarrier):
        return _affine_value(spec.mu, spec.nu, x[:spec.n1], x[spec.n1:])
    if isinstance(spec, PiecewiseBarrier):
        piece = spec.pieces[active_piece(spec, x)]
        return _affine_value(piece.mu, piece.nu, x[:spec.n1], x[spec.n1:])
    raise WrongVariantError(f"not a barrier: {type(spec).__name__}")


def affine_input_halfspace(sys: PartiallyAffineSystem, spec: AffineBarrier, x) -> tuple[np.ndarray, float]:
    """Coefficients ``(a, c)`` with ``h(step(x, u)) = a @ u + c`` for every ``u``.

    The safe input set is ``{u in U : a @ u + c >= 0}``.
    """
    if not isinstance(spec, AffineBarrier):
        raise WrongVariantError(f"affine barrier required, got {type(spec).__name__}")
    if spec.n1 != sys.n1:
        raise ContractViolation(f"barrier splits at n1={spec.n1}, system at n1={sys.n1}")
    f1, f2, g = sys.drift(x)
    mu = _vec(spec.mu(f1))
    return mu @ g, float(mu @ f2 + float(spec.nu(f1)))


def in_safe_input_set(sys: PartiallyAffineSystem, spec: BarrierSpec, x, u) -> bool:
    """True iff ``u`` is in the input box and the next state has ``h >= 0``."""
    if not sys.in_box(u):
        return False
    return barrier_value(spec, step(sys, x, u)) >= 0


@dataclass(frozen=True)
class ComparisonParams:
    """Decay parameters of the two more conservative safe input sets.

    ``gamma`` scales the current barrier value; ``alpha`` is a class-K
    function. Construction checks ``0 <= gamma <= 1``, ``alpha(0) = 0`` and
    strict monotonicity of ``alpha`` on ``grid``. The extra requirement
    ``alpha(s) < s`` is checked separately by :meth:`below_identity` because
    the limiting choice ``alpha(s) = s`` is a legitimate input.
    """

    gamma: float
    alpha: Callable[[float], float]
    grid: tuple[float, ...] = tuple(np.linspace(0.0, 10.0, 201))

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractViolation(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.alpha(0.0) != 0.0:
            raise ContractViolation("alpha(0) must be 0")
        values = np.array([self.alpha(s) for s in self.grid])
        if np.any(np.diff(values) <= 0):
            raise ContractViolation("alpha must be strictly increasing on the grid")

    def below_identity(self) -> bool:
        return all(self.alpha(s) < s for s in self.grid if s > 0)


def in_prior_input_sets(sys: PartiallyAffineSystem, spec: BarrierSpec, x, u,
                        params: ComparisonParams) -> tuple[bool, bool]:
    """Membership of ``u`` in the gamma-decay and alpha-decay safe input sets.

    Returns ``(in_gamma_set, in_alpha_set)`` where::

        in_gamma_set:  h(next) + (gamma - 1) h(x) >= 0
        in_alpha_set:  h(next) + (alpha(h(x)) - h(x)) >= 0

    both intersected with the input box. Raises :class:`DomainError` when
    ``h(x) < 0``.
    """
    h0 = barrier_value(spec, x)
    if h0 < 0:
        raise DomainError(f"x is not in the safe set (h(x) = {h0:.6g})")
    if not sys.in_box(u):
        return False, False
    h1 = barrier_value(spec, step(sys, x, u))
    # grouped so gamma = 1 and alpha = id reproduce h1 >= 0 bit for bit
    in_gamma = h1 + (params.gamma - 1.0) * h0 >= 0
    in_alpha = h1 + (params.alpha(h0) - h0) >= 0
    return bool(in_gamma), bool(in_alpha)


# --- invariance checking ----------------------------------------------------

@dataclass(frozen=True)
class SearchResult:
    """Input chosen by a search strategy.

    ``u is None`` means nothing was found; ``certified_empty`` says whether
    the strategy proves that the safe input set is empty.
    """

    u: np.ndarray | None
    certified_empty: bool = False


def affine_qp_search(sys: PartiallyAffineSystem, spec: AffineBarrier, x) -> SearchResult:
    """Minimum-norm input of the affine safe input set (exact)."""
    a, c = affine_input_halfspace(sys, spec, x)
    lo, hi = np.asarray(sys.input_lower), np.asarray(sys.input_upper)
    rows, rhs = [a], [-c]
    eye = np.eye(sys.m)
    for i in range(sys.m):
        if np.isfinite(lo[i]):
            rows.append(eye[i])
            rhs.append(lo[i])
        if np.isfinite(hi[i]):
            rows.append(-eye[i])
            rhs.append(-hi[i])
    res = solve_qp(np.eye(sys.m), np.zeros(sys.m), A_in=np.array(rows), b_in=np.array(rhs))
    if not res.optimal:
        return SearchResult(None, certified_empty=True)
    # project the last ulp back into the box
    return SearchResult(np.clip(res.x, lo, hi))


@dataclass(frozen=True)
class GridSearch:
    """Exhaustive search over a regular grid of the (finite) input box.

    Returns the admissible grid point of smallest norm. A miss is not a
    proof that the safe input set is empty.
    """

    resolution: int = 101

    def __call__(self, sys: PartiallyAffineSystem, spec: BarrierSpec, x) -> SearchResult:
        lo, hi = np.asarray(sys.input_lower), np.asarray(sys.input_upper)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ContractViolation("grid search needs a finite input box")
        axes = [np.linspace(lo[i], hi[i], self.resolution) for i in range(sys.m)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, sys.m)
        order = np.argsort(np.linalg.norm(grid, axis=1), kind="stable")
        for u in grid[order]:
            if barrier_value(spec, step(sys, x, u)) >= 0:
                return SearchResult(u)
        return SearchResult(None, certified_empty=False)


def default_input_search(spec: BarrierSpec):
    return affine_qp_search if isinstance(spec, AffineBarrier) else GridSearch()


@dataclass(frozen=True)
class SampleResult:
    x0: np.ndarray
    invariant: bool
    steps_completed: int
    violation_state: np.ndarray | None = None
    falsified: bool = False
    reason: str = ""


@dataclass(frozen=True)
class InvarianceReport:
    samples: tuple[SampleResult, ...] = field(default_factory=tuple)

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def n_invariant(self) -> int:
        return sum(s.invariant for s in self.samples)

    @property
    def n_falsified(self) -> int:
        return sum(s.falsified for s in self.samples)

    @property
    def falsified(self) -> bool:
        return self.n_falsified > 0

    def summary(self) -> dict:
        return {
            "samples": self.n_samples,
            "invariant": self.n_invariant,
            "falsified": self.n_falsified,
            "failures": [
                {"x0": s.x0.tolist(), "steps": s.steps_completed, "reason": s.reason,
                 "state": None if s.violation_state is None else s.violation_state.tolist()}
                for s in self.samples if not s.invariant
            ],
        }


def check_invariance(sys: PartiallyAffineSystem, spec: BarrierSpec, states: Iterable,
                     input_search=None, steps: int = 50, tol: float = 0.0) -> InvarianceReport:
    """Roll each initial state forward under inputs picked from the safe input set.

    Parameters
    ----------
    states : iterable of array_like
        Initial states, each expected to satisfy ``h >= 0``.
    input_search : callable, optional
        ``input_search(sys, spec, x) -> SearchResult``. Defaults to the
        exact QP for affine barriers and a grid search otherwise.
    steps : int
        Rollout length.
    tol : float
        States with ``h >= -tol`` count as safe (absorbs round-off).

    Returns
    -------
    InvarianceReport
        Per-sample outcome. A sample whose safe input set is certified empty
        is a falsification: the one-step supremum condition fails there.
    """
    search = input_search or default_input_search(spec)
    results = []
    for x0 in states:
        x = sys.check_state(x0)
        x0 = x.copy()
        outcome = SampleResult(x0, True, steps)
        for k in range(steps):
            if barrier_value(spec, x) < -tol:
                outcome = SampleResult(x0, False, k, x, reason="left safe set")
                break
            found = search(sys, spec, x)
            if found.u is None:
                reason = "safe input set empty" if found.certified_empty else "search found no input"
                outcome = SampleResult(x0, False, k, x, falsified=found.certified_empty, reason=reason)
                break
            x = step(sys, x, found.u, check_bounds=False)
        else:
            if barrier_value(spec, x) < -tol:
                outcome = SampleResult(x0, False, steps, x, reason="left safe set")
        results.append(outcome)
    return InvarianceReport(tuple(results))


def sample_safe_states(spec: BarrierSpec, low: Sequence[float], high: Sequence[float], count: int,
                       rng: np.random.Generator, max_tries: int = 100_000) -> list[np.ndarray]:
    """Rejection-sample ``count`` states from a box with ``h >= 0``."""
    low, high = np.asarray(low, float), np.asarray(high, float)
    out = []
    for _ in range(max_tries):
        x = rng.uniform(low, high)
        try:
            if barrier_value(spec, x) >= 0:
                out.append(x)
        except DomainError:
            continue
        if len(out) == count:
            return out
    raise DomainError(f"found only {len(out)} safe states in {max_tries} draws")


def random_affine_case(rng: np.random.Generator, n1: int | None = None, n2: int | None = None,
                       m: int | None = None) -> tuple[PartiallyAffineSystem, AffineBarrier]:
    """Random linear system with an input box and a barrier affine in ``x2``.

    ``mu`` and ``nu`` are affine in ``x1``, so ``h`` is bilinear overall.
    Used by the self-checks that compare the safe input set variants.
    """
    n1 = int(rng.integers(0, 3)) if n1 is None else n1
    n2 = int(rng.integers(1, 3)) if n2 is None else n2
    m = int(rng.integers(1, 3)) if m is None else m
    n = n1 + n2
    A1, c1 = rng.normal(size=(n1, n)), rng.normal(size=n1)
    A2, c2 = rng.normal(size=(n2, n)), rng.normal(size=n2)
    G = rng.normal(size=(n2, m))
    mu0, Mu = rng.normal(size=n2), rng.normal(size=(n2, n1))
    nu0, nu1 = rng.normal(), rng.normal(size=n1)
    half = rng.uniform(0.5, 2.0, size=m)
    sys = PartiallyAffineSystem(n1, n2, m, f1=lambda x: A1 @ x + c1, f2=lambda x: A2 @ x + c2,
                                g=lambda x: G, input_lower=tuple(-half), input_upper=tuple(half))
    spec = AffineBarrier(n1, mu=lambda x1: mu0 + Mu @ x1, nu=lambda x1: nu0 + nu1 @ x1)
    return sys, spec
