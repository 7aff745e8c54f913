"""Dense dual active-set solver for small, strictly convex quadratic programs.

Solves::

    minimize    0.5 x' H x + F' x
    subject to  A_eq x  = b_eq
                A_in x >= b_in

with the Goldfarb-Idnani dual method. The iteration starts from the
unconstrained minimizer and adds violated constraints one at a time, so no
feasible starting point is needed and infeasibility is detected when a
violated constraint cannot be reached by any primal or dual step.

Dimensions in this package are tiny (a handful of variables, a few dozen
rows), so every step re-solves with the Cholesky factor of ``H`` instead of
updating factorizations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DefinitenessError, SolverFailure

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"

KKT_TOL = 1e-8
# sine of the angle below which a new row counts as dependent on the active ones
DEPENDENCE_TOL = 1e-9


@dataclass(frozen=True)
class QpResult:
    """Outcome of :func:`solve_qp`.

    ``lam_eq`` and ``lam_in`` are the multipliers of the original (unscaled)
    rows; stationarity reads ``H x + F = A_eq' lam_eq + A_in' lam_in``.
    """

    status: str
    x: np.ndarray | None = None
    objective: float = float("nan")
    lam_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lam_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    active: tuple[int, ...] = ()
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def _as_rows(A, b, n, name):
    if A is None:
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if A.size == 0:
        return np.zeros((0, n)), np.zeros(0)
    if A.shape[1] != n or A.shape[0] != b.shape[0]:
        raise ContractViolation(f"{name}: expected ({b.shape[0]}, {n}) rows, got {A.shape}")
    return A, b


def cholesky_factor(H) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite ``H``."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if H.shape[0] != H.shape[1]:
        raise ContractViolation(f"H must be square, got {H.shape}")
    scale = max(np.linalg.norm(H), 1.0)
    if np.linalg.norm(H - H.T) > 1e-12 * scale:
        raise DefinitenessError("H is not symmetric")
    try:
        return np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise DefinitenessError("H is not positive definite") from exc


def solve_qp(H, F, A_eq=None, b_eq=None, A_in=None, b_in=None, *, max_iter=None,
             certify=True) -> QpResult:
    """Minimize ``0.5 x'Hx + F'x`` subject to ``A_eq x = b_eq``, ``A_in x >= b_in``.

    Parameters
    ----------
    H : (n, n) array_like
        Symmetric positive-definite cost matrix.
    F : (n,) array_like
        Linear cost.
    A_eq, b_eq, A_in, b_in : array_like, optional
        Equality and inequality rows. Either pair may be omitted.
    max_iter : int, optional
        Iteration budget; defaults to ``50 * (rows + n) + 100``.
    certify : bool
        Re-check the KKT conditions of an optimal answer against the
        original data and raise :class:`SolverFailure` if they fail.

    Returns
    -------
    QpResult
        ``status`` is ``"optimal"`` or ``"infeasible"``.
    """
    F = np.atleast_1d(np.asarray(F, dtype=float))
    n = F.shape[0]
    L = cholesky_factor(H)
    H = np.asarray(H, dtype=float).reshape(n, n)
    A_eq, b_eq = _as_rows(A_eq, b_eq, n, "A_eq")
    A_in, b_in = _as_rows(A_in, b_in, n, "A_in")
    n_eq, n_in = len(b_eq), len(b_in)

    def hsolve(v):
        return np.linalg.solve(L.T, np.linalg.solve(L, v))

    # unit-norm rows keep every tolerance in the same units
    rows = np.vstack([A_eq, A_in])
    rhs = np.concatenate([b_eq, b_in])
    norms = np.linalg.norm(rows, axis=1)
    zero = norms == 0.0
    for i in np.flatnonzero(zero):
        if (i < n_eq and abs(rhs[i]) > 1e-12) or (i >= n_eq and rhs[i] > 1e-12):
            return QpResult(INFEASIBLE)
    norms[zero] = 1.0
    N = rows / norms[:, None]
    c = rhs / norms
    is_eq = np.arange(len(c)) < n_eq
    budget = max_iter if max_iter is not None else 50 * (len(c) + n) + 100

    x = -hsolve(F)
    active: list[int] = []
    sign: dict[int, float] = {}
    lam = np.zeros(0)
    iterations = 0

    def direction(normal):
        # work in the whitened space v = L^-1 n, where the step is the part of
        # v orthogonal to the active normals; n'd = |w|^2 and the angle to the
        # active span decides linear dependence
        v = np.linalg.solve(L, normal)
        if not active:
            w, r = v, np.zeros(0)
        elif len(active) >= n:
            return None, np.linalg.lstsq(active_basis(), v, rcond=None)[0], v
        else:
            Q, R = np.linalg.qr(active_basis())
            coef = Q.T @ v
            w = v - Q @ coef
            r = np.linalg.solve(R, coef)
        if w @ w <= DEPENDENCE_TOL**2 * (v @ v):
            return None, r, v
        return np.linalg.solve(L.T, w), r, v

    def active_basis():
        return np.linalg.solve(L, np.array([sign[j] * N[j] for j in active]).T)

    def violation_tol(i):
        return 1e-12 * (1.0 + abs(c[i]) + np.linalg.norm(x))

    for i in range(n_eq):
        if zero[i]:
            continue
        s = N[i] @ x - c[i]
        sign[i] = 1.0 if s <= 0 else -1.0
        normal = sign[i] * N[i]
        d, r, _ = direction(normal)
        if d is None:
            # dependent on the equalities already active
            if abs(s) > 1e-9 * (1.0 + abs(c[i])):
                return QpResult(INFEASIBLE, iterations=iterations)
            continue
        t = -(normal @ x - sign[i] * c[i]) / (normal @ d)
        x = x + t * d
        lam = np.append(lam - t * r, t)
        active.append(i)

    while True:
        slack = N @ x - c
        candidates = [i for i in range(n_eq, len(c)) if not zero[i] and i not in active
                      and slack[i] < -violation_tol(i)]
        if not candidates:
            break
        p = min(candidates, key=lambda i: (slack[i], i))
        sign[p] = 1.0
        lam_p = 0.0
        while True:
            iterations += 1
            if iterations > budget:
                raise SolverFailure(f"active-set iteration limit {budget} reached")
            d, r, _ = direction(N[p])
            t1, k = np.inf, None
            for j, idx in enumerate(active):
                if not is_eq[idx] and r[j] > 1e-14:
                    ratio = lam[j] / r[j]
                    if ratio < t1:
                        t1, k = ratio, j
            t2 = np.inf if d is None else -(N[p] @ x - c[p]) / (N[p] @ d)
            t = min(t1, t2)
            if not np.isfinite(t):
                return QpResult(INFEASIBLE, iterations=iterations)
            if np.isfinite(t2):
                x = x + t * d
            lam = lam - t * r
            lam_p += t
            if t2 <= t1:
                lam = np.append(lam, lam_p)
                active.append(p)
                break
            lam = np.delete(lam, k)
            del active[k]

    lam_eq = np.zeros(n_eq)
    lam_in = np.zeros(n_in)
    for j, idx in enumerate(active):
        value = sign[idx] * lam[j] / norms[idx]
        if idx < n_eq:
            lam_eq[idx] = value
        else:
            lam_in[idx - n_eq] = max(value, 0.0)
    objective = float(0.5 * x @ H @ x + F @ x)
    result = QpResult(OPTIMAL, x, objective, lam_eq, lam_in,
                      tuple(sorted(idx - n_eq for idx in active if idx >= n_eq)), iterations)
    if certify:
        res = kkt_residuals(H, F, A_eq, b_eq, A_in, b_in, x, lam_eq, lam_in)
        bad = {key: val for key, val in res.items() if val > KKT_TOL}
        if bad:
            raise SolverFailure(f"KKT certification failed: {bad}")
    return result


def kkt_residuals(H, F, A_eq, b_eq, A_in, b_in, x, lam_eq, lam_in) -> dict[str, float]:
    """Scaled KKT residuals of a candidate primal-dual pair.

    Computed from the problem data alone, so it is independent of the active
    set bookkeeping inside :func:`solve_qp`. Each entry is non-negative and
    should be below ``1e-8`` at a certified optimum.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    F = np.atleast_1d(np.asarray(F, dtype=float))
    n = F.shape[0]
    A_eq, b_eq = _as_rows(A_eq, b_eq, n, "A_eq")
    A_in, b_in = _as_rows(A_in, b_in, n, "A_in")
    x = np.asarray(x, dtype=float)
    lam_eq = np.asarray(lam_eq, dtype=float).reshape(-1)
    lam_in = np.asarray(lam_in, dtype=float).reshape(-1)

    grad = H @ x + F
    scale = 1.0 + np.linalg.norm(H, np.inf) * np.linalg.norm(x, np.inf) + np.linalg.norm(F, np.inf)
    stationarity = grad - A_eq.T @ lam_eq - A_in.T @ lam_in
    # large multipliers on nearly dependent rows cancel; measure relative to them
    pull = np.abs(A_eq.T) @ np.abs(lam_eq) + np.abs(A_in.T) @ np.abs(lam_in)
    out = {"stationarity": float(np.max(np.abs(stationarity), initial=0.0)
                                 / (scale + np.max(pull, initial=0.0)))}

    row_eq = np.maximum(np.linalg.norm(A_eq, axis=1), 1e-300)
    row_in = np.maximum(np.linalg.norm(A_in, axis=1), 1e-300)
    s_eq = (A_eq @ x - b_eq) / row_eq
    s_in = (A_in @ x - b_in) / row_in
    out["primal"] = float(max(np.max(np.abs(s_eq), initial=0.0),
                              np.max(-s_in, initial=0.0)) / (1.0 + np.linalg.norm(x, np.inf)))
    out["dual"] = float(np.max(-lam_in, initial=0.0))
    lam_scale = 1.0 + np.max(np.abs(lam_in) * row_in, initial=0.0)
    out["complementarity"] = float(np.max(np.abs(lam_in * row_in * s_in), initial=0.0)
                                   / (lam_scale * (1.0 + np.linalg.norm(x, np.inf))))
    return out
