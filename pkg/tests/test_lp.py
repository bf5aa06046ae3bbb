"""Tests for the canonical LP layer: builder, both solver engines, KKT checks.

Groups:
  1. Structured build -> canonical form (row canonicalization, parameter
     jacobians, bound folding, deterministic ordering, round trip).
  2. Bland-rule simplex engine: frozen small instances, statuses, duals,
     a randomized battery cross-checked against a vertex-enumeration oracle,
     bit-identical determinism, objective affinity in the RHS parameters.
  3. HiGHS engine adapter: same contracts, cross-engine agreement.
  4. check_kkt: accepts solver output, flags constructed violations.

The vertex-enumeration oracle in _util.py is written directly against the
mathematical definition (enumerate active sets, solve, filter feasible,
take the best) and shares no code with the solver under test.
"""

import numpy as np
import pytest

from _util import folded_arrays, oracle_min_objective, random_box_lp
from mesval.lp import (
    LinearProgram,
    LPBuildError,
    LPSolution,
    check_kkt,
    solve_lp,
    to_standard_form,
)

RNG_SEED = 20240814


# ---------------------------------------------------------------------------
# 1. structured build -> canonical form
# ---------------------------------------------------------------------------

def test_ge_row_canonicalized_with_param_jacobian():
    # min x subject to x >= M: canonical row -x <= -M, so A_f = [-1] and
    # d b_f / d M = [-1].
    prog = LinearProgram()
    prog.add_param("M")
    prog.add_var("x", cost=1.0)
    prog.add_constraint({"x": 1.0}, ">=", 0.0, params={"M": 1.0})
    lp = to_standard_form(prog)
    assert lp.n_vars == 1 and lp.param_dim == 1
    np.testing.assert_allclose(lp.A_f, [[-1.0]])
    np.testing.assert_allclose(lp.b_f0, [0.0])
    np.testing.assert_allclose(lp.B_f, [[-1.0]])
    assert lp.A_h.shape == (0, 1)
    np.testing.assert_allclose(lp.b_f(np.array([3.0])), [-3.0])


def test_equality_row_lands_in_equality_block():
    prog = LinearProgram()
    prog.add_var("x", cost=1.0)
    prog.add_var("y", cost=0.0)
    prog.add_constraint({"x": 2.0, "y": 1.0}, "==", 5.0)
    lp = to_standard_form(prog)
    assert lp.A_f.shape == (0, 2)
    np.testing.assert_allclose(lp.A_h, [[2.0, 1.0]])
    np.testing.assert_allclose(lp.b_h0, [5.0])
    assert lp.B_h.shape == (1, 0)


def test_row_and_variable_order_is_declaration_order():
    prog = LinearProgram()
    prog.add_var("a", cost=1.0)
    prog.add_var("b", cost=2.0)
    prog.add_constraint({"b": 1.0}, "<=", 4.0, name="cap_b")
    prog.add_constraint({"a": 1.0, "b": -1.0}, ">=", -1.0, name="link")
    lp = to_standard_form(prog)
    assert lp.var_names == ("a", "b")
    assert lp.ineq_names == ("cap_b", "link")
    np.testing.assert_allclose(lp.A_f, [[0.0, 1.0], [-1.0, 1.0]])
    np.testing.assert_allclose(lp.b_f0, [4.0, 1.0])


def test_round_trip_through_canonical_form():
    rng = np.random.default_rng(RNG_SEED)
    prog, M0 = random_box_lp(rng, 3, 4, 1, 2)
    lp = to_standard_form(prog)
    rebuilt = LinearProgram()
    for k in range(lp.param_dim):
        rebuilt.add_param(lp.param_names[k])
    for j, name in enumerate(lp.var_names):
        rebuilt.add_var(name, lb=float(lp.lb[j]), ub=float(lp.ub[j]),
                        cost=float(lp.c[j]))
    for i, name in enumerate(lp.ineq_names):
        rebuilt.add_constraint(
            dict(zip(lp.var_names, lp.A_f[i])), "<=", float(lp.b_f0[i]),
            params=dict(zip(lp.param_names, lp.B_f[i])), name=name)
    for i, name in enumerate(lp.eq_names):
        rebuilt.add_constraint(
            dict(zip(lp.var_names, lp.A_h[i])), "==", float(lp.b_h0[i]),
            params=dict(zip(lp.param_names, lp.B_h[i])), name=name)
    lp2 = to_standard_form(rebuilt)
    np.testing.assert_array_equal(lp.c, lp2.c)
    np.testing.assert_array_equal(lp.A_f, lp2.A_f)
    np.testing.assert_array_equal(lp.B_f, lp2.B_f)
    np.testing.assert_array_equal(lp.A_h, lp2.A_h)
    np.testing.assert_array_equal(lp.B_h, lp2.B_h)
    np.testing.assert_array_equal(lp.lb, lp2.lb)
    np.testing.assert_array_equal(lp.ub, lp2.ub)


def test_fold_bounds_appends_rows_in_documented_order():
    prog = LinearProgram()
    prog.add_var("x", lb=0.0, ub=2.0, cost=1.0)
    prog.add_var("y", lb=-1.0, cost=1.0)  # no upper bound
    prog.add_constraint({"x": 1.0, "y": 1.0}, "<=", 3.0)
    lp = to_standard_form(prog)
    f = lp.fold_bounds()
    # order: declared rows, then -z_j <= -lb_j for finite lb, then z_j <= ub_j
    np.testing.assert_allclose(f.A_f, [[1.0, 1.0], [-1.0, 0.0],
                                       [0.0, -1.0], [1.0, 0.0]])
    np.testing.assert_allclose(f.b_f0, [3.0, 0.0, 1.0, 2.0])
    assert f.B_f.shape[0] == 4
    np.testing.assert_allclose(f.B_f[1:], 0.0)  # bound rows carry no params
    assert np.isinf(f.lb).all() and np.isinf(f.ub).all()
    np.testing.assert_array_equal(f.lb_row_vars, [0, 1])
    np.testing.assert_array_equal(f.ub_row_vars, [0])


def test_builder_rejects_bad_input():
    prog = LinearProgram()
    prog.add_var("x")
    with pytest.raises(LPBuildError):
        prog.add_var("x")  # duplicate name
    with pytest.raises(LPBuildError):
        prog.add_constraint({"nope": 1.0}, "<=", 0.0)
    with pytest.raises(LPBuildError):
        prog.add_constraint({"x": 1.0}, "<<", 0.0)
    with pytest.raises(LPBuildError):
        prog.add_constraint({"x": np.nan}, "<=", 0.0)
    with pytest.raises(LPBuildError):
        prog.add_constraint({"x": 1.0}, "<=", 0.0, params={"ghost": 1.0})
    with pytest.raises(LPBuildError):
        prog.add_var("y", lb=2.0, ub=1.0)


# ---------------------------------------------------------------------------
# 2. Bland-rule engine
# ---------------------------------------------------------------------------

def simple_lp(sense_rows, cost, bounds=None, params=0):
    """Helper: one- or two-variable program from terse row tuples."""
    prog = LinearProgram()
    for k in range(params):
        prog.add_param(f"m{k}")
    nv = len(cost)
    for j in range(nv):
        lb, ub = (None, None) if bounds is None else bounds[j]
        prog.add_var(f"z{j}", lb=lb, ub=ub, cost=cost[j])
    for coeffs, sense, rhs in sense_rows:
        prog.add_constraint(dict(zip([f"z{j}" for j in range(nv)], coeffs)),
                            sense, rhs)
    return to_standard_form(prog)


def test_single_binding_row_primal_and_dual():
    # min x subject to x >= 3: optimum x = 3 with dual weight 1 on the row.
    lp = simple_lp([((1.0,), ">=", 3.0)], (1.0,))
    sol = solve_lp(lp, np.zeros(0))
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.primal, [3.0], atol=1e-9)
    assert abs(sol.objective - 3.0) < 1e-9
    np.testing.assert_allclose(sol.ineq_duals, [1.0], atol=1e-9)
    assert check_kkt(lp, np.zeros(0), sol).ok


def test_box_vertex_optimum_matches_oracle():
    # min -x - y subject to x + y <= 1.5, 0 <= x,y <= 1: optimum value -1.5.
    lp = simple_lp([((1.0, 1.0), "<=", 1.5)], (-1.0, -1.0),
                   bounds=[(0.0, 1.0), (0.0, 1.0)])
    sol = solve_lp(lp, np.zeros(0))
    assert sol.status == "optimal"
    assert abs(sol.objective - (-1.5)) < 1e-9
    A_ub, b_ub, A_eq, b_eq = folded_arrays(lp, np.zeros(0))
    best, _ = oracle_min_objective(lp.c, A_ub, b_ub, None, None)
    assert abs(sol.objective - best) < 1e-9
    assert check_kkt(lp, np.zeros(0), sol).ok


def test_unbounded_reported_as_status():
    lp = simple_lp([((1.0,), ">=", 0.0)], (-1.0,))
    sol = solve_lp(lp, np.zeros(0))
    assert sol.status == "unbounded"
    assert sol.primal is None


def test_infeasible_reported_as_status():
    lp = simple_lp([((1.0,), ">=", 1.0), ((1.0,), "<=", 0.0)], (1.0,))
    sol = solve_lp(lp, np.zeros(0))
    assert sol.status == "infeasible"


def test_equality_pinned_point():
    lp = simple_lp([((2.0, 1.0), "==", 5.0), ((1.0, -1.0), "==", 1.0)],
                   (1.0, 1.0))
    sol = solve_lp(lp, np.zeros(0))
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.primal, [2.0, 1.0], atol=1e-9)
    assert check_kkt(lp, np.zeros(0), sol).ok


def test_redundant_rows_do_not_break_duals():
    lp = simple_lp([((1.0, 1.0), "<=", 2.0), ((2.0, 2.0), "<=", 4.0),
                    ((1.0, 0.0), ">=", 0.5), ((1.0, 0.0), ">=", 0.5)],
                   (-1.0, -1.0), bounds=[(0.0, 3.0), (0.0, 3.0)])
    sol = solve_lp(lp, np.zeros(0))
    assert sol.status == "optimal"
    assert abs(sol.objective - (-2.0)) < 1e-9
    assert check_kkt(lp, np.zeros(0), sol).ok


def test_battery_matches_vertex_oracle_and_kkt():
    rng = np.random.default_rng(RNG_SEED)
    solved = 0
    for trial in range(40):
        n = int(rng.integers(2, 5))
        prog, M0 = random_box_lp(rng, n, int(rng.integers(1, 5)),
                                 int(rng.integers(0, min(2, n))), 2)
        lp = to_standard_form(prog)
        sol = solve_lp(lp, M0)
        assert sol.status == "optimal", f"trial {trial} unexpectedly {sol.status}"
        A_ub, b_ub, A_eq, b_eq = folded_arrays(lp, M0)
        best, _ = oracle_min_objective(
            lp.c, A_ub, b_ub, A_eq if A_eq.size else None,
            b_eq if A_eq.size else None)
        assert abs(sol.objective - best) < 1e-7, f"trial {trial}"
        rep = check_kkt(lp, M0, sol)
        assert rep.ok, f"trial {trial}: {rep}"
        solved += 1
    assert solved == 40


def test_repeat_solve_is_bit_identical():
    rng = np.random.default_rng(RNG_SEED + 1)
    prog, M0 = random_box_lp(rng, 4, 5, 1, 2)
    lp = to_standard_form(prog)
    a = solve_lp(lp, M0)
    b = solve_lp(lp, M0)
    assert a.objective == b.objective
    assert np.array_equal(a.primal, b.primal)
    assert np.array_equal(a.ineq_duals, b.ineq_duals)
    assert np.array_equal(a.eq_duals, b.eq_duals)
    assert a.basis == b.basis


def test_objective_affine_in_rhs_parameters_for_fixed_basis():
    # three-point collinearity: C*(M - d), C*(M), C*(M + d) on a line while
    # the basis does not move.
    rng = np.random.default_rng(RNG_SEED + 2)
    checked = 0
    for trial in range(20):
        prog, M0 = random_box_lp(rng, 3, 4, 0, 2)
        lp = to_standard_form(prog)
        d = 1e-3 * rng.standard_normal(2)
        sols = [solve_lp(lp, M0 + s * d) for s in (-1.0, 0.0, 1.0)]
        if any(s.status != "optimal" for s in sols):
            continue
        if sols[0].basis != sols[1].basis or sols[1].basis != sols[2].basis:
            continue
        curvature = sols[0].objective + sols[2].objective - 2 * sols[1].objective
        assert abs(curvature) < 1e-9 * (1.0 + abs(sols[1].objective))
        checked += 1
    assert checked >= 10


# ---------------------------------------------------------------------------
# 3. HiGHS engine adapter
# ---------------------------------------------------------------------------

def test_highs_engine_agrees_with_bland():
    rng = np.random.default_rng(RNG_SEED + 3)
    for trial in range(25):
        n = int(rng.integers(2, 5))
        prog, M0 = random_box_lp(rng, n, int(rng.integers(1, 5)),
                                 int(rng.integers(0, 2)), 2)
        lp = to_standard_form(prog)
        a = solve_lp(lp, M0, engine="bland")
        b = solve_lp(lp, M0, engine="highs")
        assert a.status == b.status == "optimal"
        assert abs(a.objective - b.objective) < 1e-8 * (1 + abs(a.objective))
        assert check_kkt(lp, M0, b).ok, f"trial {trial}"


def test_highs_statuses():
    lp = simple_lp([((1.0,), ">=", 1.0), ((1.0,), "<=", 0.0)], (1.0,))
    assert solve_lp(lp, np.zeros(0), engine="highs").status == "infeasible"
    lp2 = simple_lp([((1.0,), ">=", 0.0)], (-1.0,))
    assert solve_lp(lp2, np.zeros(0), engine="highs").status == "unbounded"


def test_highs_bound_duals_cover_folded_rows():
    # active upper bound must show up as a positive dual on its folded row
    lp = simple_lp([], (-1.0,), bounds=[(0.0, 2.0)])
    sol = solve_lp(lp, np.zeros(0), engine="highs")
    assert sol.status == "optimal"
    np.testing.assert_allclose(sol.primal, [2.0], atol=1e-9)
    f = lp.fold_bounds()
    assert sol.ineq_duals.shape == (f.A_f.shape[0],)
    # rows: -x <= 0 (lb), x <= 2 (ub); only the ub row is active
    np.testing.assert_allclose(sol.ineq_duals, [0.0, 1.0], atol=1e-9)
    assert check_kkt(lp, np.zeros(0), sol).ok


# ---------------------------------------------------------------------------
# 4. check_kkt flags constructed violations
# ---------------------------------------------------------------------------

def _clean_solution():
    lp = simple_lp([((1.0,), ">=", 3.0)], (1.0,))
    sol = solve_lp(lp, np.zeros(0))
    return lp, sol


def test_check_kkt_flags_primal_violation():
    lp, sol = _clean_solution()
    bad = LPSolution(status="optimal", primal=np.array([2.0]),
                     ineq_duals=sol.ineq_duals, eq_duals=sol.eq_duals,
                     objective=2.0, basis=sol.basis)
    rep = check_kkt(lp, np.zeros(0), bad)
    assert not rep.ok and rep.primal_ineq > 1e-6


def test_check_kkt_flags_negative_dual():
    lp, sol = _clean_solution()
    bad = LPSolution(status="optimal", primal=sol.primal,
                     ineq_duals=np.array([-1.0]), eq_duals=sol.eq_duals,
                     objective=sol.objective, basis=sol.basis)
    rep = check_kkt(lp, np.zeros(0), bad)
    assert not rep.ok and rep.dual_nonneg > 1e-6


def test_check_kkt_flags_complementarity_violation():
    lp = simple_lp([((1.0,), ">=", 3.0), ((1.0,), "<=", 10.0)], (1.0,))
    sol = solve_lp(lp, np.zeros(0))
    lam = sol.ineq_duals.copy()
    lam[1] += 0.5  # inactive row given weight
    bad = LPSolution(status="optimal", primal=sol.primal, ineq_duals=lam,
                     eq_duals=sol.eq_duals, objective=sol.objective,
                     basis=sol.basis)
    rep = check_kkt(lp, np.zeros(0), bad)
    assert not rep.ok and rep.complementarity > 1e-6


def test_check_kkt_flags_stationarity_violation():
    lp, sol = _clean_solution()
    bad = LPSolution(status="optimal", primal=sol.primal,
                     ineq_duals=np.array([0.0]), eq_duals=sol.eq_duals,
                     objective=sol.objective, basis=sol.basis)
    rep = check_kkt(lp, np.zeros(0), bad)
    assert not rep.ok and rep.stationarity > 1e-6
