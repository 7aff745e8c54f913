import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from dtcbf.errors import ContractViolation, DefinitenessError, SolverFailure
from dtcbf.qp import INFEASIBLE, kkt_residuals, solve_qp


def test_projection_onto_half_line():
    res = solve_qp([[1.0]], [0.0], A_in=[[1.0]], b_in=[2.0])
    assert res.optimal
    assert res.x[0] == pytest.approx(2.0, abs=1e-12)
    assert res.objective == pytest.approx(2.0, abs=1e-12)
    assert res.active == (0,)


def test_unconstrained_minimum():
    res = solve_qp([[1.0]], [0.0])
    assert res.x[0] == 0.0 and res.objective == 0.0


def test_symmetric_equality_split():
    res = solve_qp(np.eye(2), np.zeros(2), A_eq=[[1.0, 1.0]], b_eq=[1.0])
    np.testing.assert_allclose(res.x, [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(res.lam_eq, [0.5], atol=1e-12)


def test_infeasible_pair_detected():
    res = solve_qp([[1.0]], [0.0], A_in=[[1.0], [-1.0]], b_in=[1.0, 0.0])
    assert res.status == INFEASIBLE


def test_inconsistent_equalities_detected():
    res = solve_qp(np.eye(2), np.zeros(2), A_eq=[[1.0, 1.0], [2.0, 2.0]], b_eq=[1.0, 3.0])
    assert res.status == INFEASIBLE


def test_redundant_equalities_accepted():
    res = solve_qp(np.eye(2), np.zeros(2), A_eq=[[1.0, 1.0], [2.0, 2.0]], b_eq=[1.0, 2.0])
    np.testing.assert_allclose(res.x, [0.5, 0.5], atol=1e-12)


def test_zero_row_semantics():
    assert solve_qp([[1.0]], [0.0], A_in=[[0.0]], b_in=[-1.0]).optimal
    assert solve_qp([[1.0]], [0.0], A_in=[[0.0]], b_in=[1.0]).status == INFEASIBLE


def test_indefinite_cost_rejected():
    with pytest.raises(DefinitenessError):
        solve_qp([[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0])
    with pytest.raises(DefinitenessError):
        solve_qp([[1.0, 0.5], [0.0, 1.0]], [0.0, 0.0])


def test_dimension_mismatch_rejected():
    with pytest.raises(ContractViolation):
        solve_qp(np.eye(2), np.zeros(2), A_in=[[1.0, 0.0, 0.0]], b_in=[0.0])


def test_iteration_limit_is_a_failure_not_infeasibility():
    with pytest.raises(SolverFailure):
        solve_qp([[1.0]], [0.0], A_in=[[1.0]], b_in=[2.0], max_iter=0)


def _random_qp(rng):
    n = int(rng.integers(1, 5))
    L = rng.normal(size=(n, n))
    H = L @ L.T + 0.1 * np.eye(n)
    F = rng.normal(size=n)
    n_in, n_eq = int(rng.integers(0, 8)), int(rng.integers(0, min(n, 2) + 1))
    return H, F, rng.normal(size=(n_eq, n)), rng.normal(size=n_eq), rng.normal(size=(n_in, n)), rng.normal(size=n_in)


def _reference(H, F, Ae, be, Ai, bi):
    x = cp.Variable(H.shape[0])
    cons = []
    if len(be):
        cons.append(Ae @ x == be)
    if len(bi):
        cons.append(Ai @ x >= bi)
    prob = cp.Problem(cp.Minimize(0.5 * cp.quad_form(x, cp.psd_wrap(H)) + F @ x), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob


@given(st.integers(0, 2**31 - 1))
def test_agrees_with_interior_point_reference(seed):
    H, F, Ae, be, Ai, bi = _random_qp(np.random.default_rng(seed))
    res = solve_qp(H, F, Ae, be, Ai, bi)
    ref = _reference(H, F, Ae, be, Ai, bi)
    if ref.status in ("infeasible", "infeasible_inaccurate"):
        assert res.status == INFEASIBLE
    else:
        assert res.optimal
        assert res.objective == pytest.approx(ref.value, abs=1e-6, rel=1e-6)


@given(st.integers(0, 2**31 - 1))
def test_kkt_certificate_holds_independently(seed):
    H, F, Ae, be, Ai, bi = _random_qp(np.random.default_rng(seed))
    res = solve_qp(H, F, Ae, be, Ai, bi, certify=False)
    if res.optimal:
        residuals = kkt_residuals(H, F, Ae, be, Ai, bi, res.x, res.lam_eq, res.lam_in)
        assert max(residuals.values()) <= 1e-8
        assert np.all(res.lam_in >= 0)


def test_infeasibility_with_more_violated_rows_than_variables():
    # three half-planes with no common point next to the minimizer; the
    # third row that becomes active is a combination of the first two
    H = np.array([[1.2847139533568457, 0.7243846704501975], [0.7243846704501975, 1.7237233574878754]])
    F = np.array([0.8641101163032011, 0.8716526563004727])
    A = np.array([[-0.22495734707916215, -1.21765815951259], [0.34753047722009134, -1.1399974862229083],
                  [-0.6187396611046763, -1.6410310066282139], [0.9555164763115788, 0.49801068734048487],
                  [0.48488564443708376, 0.1414521595755752], [-1.4929991694323985, -0.4398293364758666]])
    b = np.array([-0.355013691899537, -0.2706705200830911, 1.8185127587998513,
                  2.524577447044108, 3.0334418943760255, -3.2640629754063575])
    assert solve_qp(H, F, A_in=A, b_in=b).status == INFEASIBLE


def test_large_multipliers_on_nearly_dependent_rows():
    H = np.array([[1.5024468671721904, 1.2205049939934076, 0.32847184965717596],
                  [1.2205049939934076, 4.176507409570742, -2.031299087753656],
                  [0.32847184965717596, -2.031299087753656, 2.110369190249856]])
    F = np.array([1.6205690850387562, -1.209240828650681, 0.7173524939392336])
    A = np.array([[-2.2449982838133726, -1.096039412089566, -0.05691587474064322],
                  [-0.11209641208466647, 1.310405694834296, 0.8677925637577188],
                  [0.9048856210570269, -0.5062977319916683, 1.0722423535688934],
                  [0.7918692635676049, 0.8817019797051734, 1.1375897619093487],
                  [-0.6553555326217468, -0.0732760462840925, -0.8400516358180417]])
    b = np.array([-1.6783257314865196, -0.8084431485223431, 0.6544963740875707,
                  1.4255110736563361, 3.9586750975677036])
    res = solve_qp(H, F, A_in=A, b_in=b)
    # interior-point reference: objective 7486055.1513, x = (-2226.095, -263.3238, 1754.9164)
    assert res.optimal and res.active == (2, 3, 4)
    assert res.objective == pytest.approx(7486055.15130361, rel=1e-9)
    np.testing.assert_allclose(res.x, [-2226.0950369, -263.32381058, 1754.91635079], rtol=1e-8)
