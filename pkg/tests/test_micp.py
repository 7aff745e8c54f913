import collections
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dtcbf.errors import ArityError, ContractViolation, ResourceLimitError, WrongVariantError
from dtcbf.micp import (EQ, GE, GT, LE, LT, AffinePredicate, And, Atom, Cardinality, Constraint,
                        ConstraintSystem, Not, Or, Variable, atoms, branch_points, compile_formula,
                        compile_piecewise, completion_exists, conjunction, disjunction, enforcement,
                        equiv, evaluate, if_then_else, implies, negate, to_nnf, xor)
from formulas import grid, random_formula

X = AffinePredicate((1.0, 0.0), 0.0, GE)      # x >= 0
Y = AffinePredicate((0.0, 1.0), 0.0, GE)      # y >= 0
XY = AffinePredicate((1.0, 1.0), -1.0, GT)    # x + y > 1
QUADRANTS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0], [0.75, 0.75]])


def feasible(formula, pts=QUADRANTS):
    return completion_exists(compile_formula(formula, 2), pts)


def test_negation_flips_sense():
    assert negate(X).sense == LT
    assert negate(negate(XY)) == XY
    with pytest.raises(ContractViolation):
        negate(AffinePredicate((1.0,), 0.0, EQ))


def test_predicate_strict_margin():
    p = AffinePredicate((1.0,), 0.0, GT)
    assert not p.holds([0.0]) and p.holds([1e-12])
    assert not p.holds([1e-12], eps_strict=1e-9)


def test_truth_tables_on_quadrants():
    x, y = QUADRANTS[:, 0] >= 0, QUADRANTS[:, 1] >= 0
    cases = {
        "and": (And((X, Y)), x & y),
        "or": (Or((X, Y)), x | y),
        "or-slack": (Or((X, Y), "slack"), x | y),
        "not": (Not(X), ~x),
        "implies": (implies(X, Y), ~x | y),
        "xor": (xor(X, Y), x ^ y),
        "equiv": (equiv(X, Y), x == y),
        "ite": (if_then_else(X, Y, Not(Y)), np.where(x, y, ~y)),
        "nand": (Not(And((X, Y))), ~(x & y)),
    }
    for name, (formula, expected) in cases.items():
        np.testing.assert_array_equal(evaluate(formula, QUADRANTS), expected, err_msg=name)
        np.testing.assert_array_equal(feasible(formula), expected, err_msg=name)


def test_de_morgan_normal_form():
    f = to_nnf(Not(And((X, Or((Y, XY))))))
    assert isinstance(f, Or)
    assert f.args[0] == Atom(negate(X))
    assert f.args[1] == And((Atom(negate(Y)), Atom(negate(XY))))
    assert to_nnf(Not(Not(X))) == Atom(X)


def test_disjunction_fragment_structure():
    system = disjunction([X, Y, XY])
    stats = system.stats()
    assert stats["binaries"] == 3 and stats["slacks"] == 3 and stats["sos1"] == 3
    assert stats["cardinality"] == 1 and stats["constraints"] == 3 and stats["strict"] == 1
    for con, group in zip(system.constraints, system.sos1):
        (sid, coef), = con.slacks
        assert coef == -1.0 and sid == group[0]
        assert system.variables[group[1]].kind == "binary"


def test_slack_pair_fragment_structure():
    system = disjunction([X, Y], encoding="slack")
    stats = system.stats()
    assert stats == {"decision": 2, "slacks": 2, "nonnegative_slacks": 2, "binaries": 0, "constraints": 2,
                     "strict": 0, "equalities": 0, "sos1": 1, "cardinality": 0}
    assert all(c.slacks[0][1] == 1.0 for c in system.constraints)


def test_conjunction_has_no_auxiliaries():
    system = conjunction([X, AffinePredicate((1.0, 0.0), 0.0, LE)])
    assert system.stats()["slacks"] == 0 and system.stats()["binaries"] == 0
    np.testing.assert_array_equal(completion_exists(system, [[0.0, 3.0], [1.0, 0.0]]), [True, False])


def test_disjunct_slack_is_shared_by_its_conjunction():
    system = compile_formula(Or((And((X, Y)), XY)))
    first = [c for c in system.constraints if "or[0]" in c.origin]
    assert len(first) == 2 and first[0].slacks == first[1].slacks


def test_arity_errors():
    with pytest.raises(ArityError):
        Or(())
    with pytest.raises(ArityError):
        And(())
    with pytest.raises(ArityError):
        Or((X, Y, XY), "slack")
    with pytest.raises(ArityError):
        disjunction([])
    with pytest.raises(WrongVariantError):
        And((X, "not a formula"))


def test_dimension_checks():
    with pytest.raises(ContractViolation):
        compile_formula(And((X, AffinePredicate((1.0,), 0.0))))
    with pytest.raises(ContractViolation):
        compile_formula(X, 3)


def test_equalities_get_their_own_slacks():
    eq = AffinePredicate((1.0, -1.0), 0.0, EQ)
    system = compile_formula(Or((And((X, eq)), Y)))
    eq_con = next(c for c in system.constraints if c.sense == EQ)
    x_con = next(c for c in system.constraints if c.sense == GE and c.coeffs == (1.0, 0.0))
    assert eq_con.slacks[0][0] != x_con.slacks[0][0]
    # the equality is relaxed together with its disjunct
    pts = np.array([[1.0, 1.0], [1.0, 2.0], [-1.0, 2.0], [-1.0, -2.0]])
    np.testing.assert_array_equal(completion_exists(system, pts), [True, True, True, False])
    with pytest.raises(ContractViolation):
        compile_formula(Or((eq, Y), "slack"))


def test_validation_rejects_malformed_systems():
    d = Variable("z", "decision")
    s = Variable("s", "slack", 0.0, math.inf)
    b = Variable("b", "binary", 0.0, 1.0)
    with pytest.raises(ContractViolation):
        ConstraintSystem((s, d))
    with pytest.raises(ContractViolation):
        ConstraintSystem((d, s), (Constraint((1.0,), 0.0, GE, ((1, -1.0),)),))
    with pytest.raises(ContractViolation):
        ConstraintSystem((d,), (Constraint((1.0,), 0.0, LE),))
    with pytest.raises(ContractViolation):
        ConstraintSystem((d, b), (Constraint((1.0,), 0.0, GE, ((1, 1.0),)),))
    with pytest.raises(ContractViolation):
        ConstraintSystem((d, b, b), (), sos1=((1, 2),))
    with pytest.raises(ContractViolation):
        ConstraintSystem((d, s), (), cardinality=(Cardinality((1,)),))


def test_compilation_is_deterministic_and_serializable():
    f = Or((And((X, Not(Y))), xor(XY, Y), Or((X, XY), "slack")))
    a, b = compile_formula(f), compile_formula(f)
    assert a == b and a.to_json() == b.to_json()
    back = ConstraintSystem.from_json(a.to_json())
    assert back == a
    assert json_bounds_are_null(a.to_dict())
    with pytest.raises(ContractViolation):
        ConstraintSystem.from_dict({**a.to_dict(), "format": "other"})


def json_bounds_are_null(doc):
    return all(v["lower"] is None for v in doc["variables"] if v["kind"] == "decision")


def test_origins_record_the_subformula_path():
    system = compile_formula(Or((X, And((Y, XY)))))
    assert [c.origin for c in system.constraints] == ["root/or[0]", "root/or[1]/and[0]", "root/or[1]/and[1]"]


def test_branch_points_and_enforcement():
    system = compile_formula(And((Or((X, Y)), Or((XY, Y), "slack"))))
    points = branch_points(system)
    assert [p.kind for p in points] == ["binary", "binary", "group"]
    enf = enforcement(system, points, (1,))
    assert enf.enforced.tolist() == [True, False, False, False]
    enf = enforcement(system, points, (0, 0))
    assert not enf.cardinality_ok
    enf = enforcement(system, points, (0, 1, 1))
    assert enf.enforced.tolist() == [False, True, True, False]


def test_decision_bounds_limit_feasibility():
    system = compile_formula(Or((X, Y)), bounds=[(-1.0, 1.0), (-5.0, 5.0)])
    np.testing.assert_array_equal(completion_exists(system, [[2.0, 1.0], [0.5, -1.0]]), [False, True])


def test_feasibility_search_budget():
    system = compile_formula(And(tuple(Or((X, Y)) for _ in range(6))))
    # the point needs two search nodes to reject
    with pytest.raises(ResourceLimitError):
        completion_exists(system, [[-1.0, -1.0]], max_nodes=1)


@given(st.integers(0, 2**31 - 1))
def test_random_formulas_match_direct_evaluation(seed):
    rng = np.random.default_rng(seed)
    counts = collections.Counter()
    formula = random_formula(rng, int(rng.integers(1, 7)), counts)
    system = compile_formula(formula, 2)
    pts = grid(9)
    clear = np.min([np.abs(a.value(pts)) for a in atoms(formula)], axis=0) > 1e-6
    feas = completion_exists(system, pts)
    np.testing.assert_array_equal(feas[clear], evaluate(formula, pts)[clear])


@given(st.integers(0, 2**31 - 1))
def test_de_morgan_preserves_truth(seed):
    rng = np.random.default_rng(seed)
    formula = random_formula(rng, int(rng.integers(1, 7)), collections.Counter())
    pts = grid(9)
    clear = np.min([np.abs(a.value(pts)) for a in atoms(formula)], axis=0) > 1e-6
    np.testing.assert_array_equal(evaluate(to_nnf(Not(formula)), pts)[clear], ~evaluate(formula, pts)[clear])


def test_piecewise_encodings_agree(params):
    from dtcbf.vehicle import lane_preview, lk_piecewise_barrier, map_reduced

    rng = np.random.default_rng(3)
    us = np.linspace(-0.2, 0.2, 201).reshape(-1, 1)
    for _ in range(20):
        x = np.array([rng.uniform(-0.8, 0.8), rng.uniform(-1, 1), rng.uniform(-0.05, 0.05), rng.uniform(-0.2, 0.2)])
        sys, z = map_reduced(params, x)
        spec = lk_piecewise_barrier(params, lane_preview(params, x, 0.0).psi_next)
        selection = completion_exists(compile_piecewise(sys, spec, z), us)
        implication = completion_exists(compile_piecewise(sys, spec, z, "implication"), us)
        np.testing.assert_array_equal(selection, implication)
    with pytest.raises(ContractViolation):
        compile_piecewise(sys, spec, z, "other")
    with pytest.raises(WrongVariantError):
        compile_piecewise(sys, X, z)
