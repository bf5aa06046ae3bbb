"""Depth-first branch-and-bound over parametric LPs with integer variables.

Search rules, all deliberately plain:

  * the relaxation at each node is solved exactly (no warm starts, no cuts);
  * a node survives only if its relaxation is optimal AND its bound is
    strictly below the incumbent objective, so ties prune;
  * branching picks the lowest-index integer variable whose relaxed value
    sits further than ``int_tol`` from an integer, and splits on floor/ceil;
  * the floor child is explored before the ceil child (LIFO stack, ceil
    pushed first);
  * every integer variable must carry finite bounds, which makes the tree
    finite without any extra termination argument.

``round_repair`` adds one shortcut on top of those rules: before branching
a fractional node, propose an integral point and test it against the node's
own constraints by direct substitution. If it is feasible and costs no more
than the relaxation bound (within a machine tie window), the node is closed
with the proposed point as an incumbent instead of being split. Scheduling
models whose exclusivity binaries carry no objective weight sit on flat LP
plateaus where vertices report fractional binaries; without the repair the
search grinds through thousands of equal-cost nodes. ``True`` proposes the
nearest-integer rounding; a callable ``(node_lp, M, sol, int_idx) -> point
or None`` supplies a problem-aware proposal instead (for example netting a
storage unit's simultaneous charge and discharge before picking the binary
side). Either way acceptance is decided only by the verification, so a bad
proposal costs one branch and the returned optimum is unchanged; only the
node trace differs. Off by default to keep the plain search rules.

A node whose relaxation is unbounded makes the whole problem report
``unbounded`` without certifying that an integer point realizes the ray;
the dispatch models built in this package bound every variable, so the case
only arises on malformed inputs.

Gradients: the optimal cost inherits the winning node's LP geometry, so its
parameter slope is obtained by differentiating that node's relaxation with
the branching bounds pinned. Two equivalent routes are provided and tested
against each other: :func:`backward_optimal_subproblem` re-solves the winning
node after the search, while :func:`embedded_gradient` differentiates each
new incumbent during the search and keeps the last. The search is
deterministic, so both differentiate the same LP at the same point. Both
take a ``method``: "kkt" solves the implicit system (primal sensitivities
included), "envelope" takes the dual slope only, and "auto" picks "kkt"
while the folded system stays small enough to factor comfortably.

:func:`enumerate_integer_assignments` is the brute-force reference used by
the acceptance battery: it pins every integer assignment in lexicographic
order and keeps the first optimum within a machine-precision tie window.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .lp import LPStandardForm, solve_lp
from .sensitivity import GradientResult, cost_gradient, dual_gradient_result

INT_TOL = 1e-6
MAX_NODES = 100_000
MAX_ASSIGNMENTS = 1 << 20
KKT_AUTO_LIMIT = 600      # folded system rows beyond which auto -> envelope


class MILPBuildError(ValueError):
    """Problem description rejected before any search."""


class NodeLimitError(RuntimeError):
    """Search exceeded its node budget."""


@dataclass(frozen=True)
class BranchStep:
    """One bound tightening on the path from the root to a node."""

    var: int
    side: str        # "floor" (new upper bound) | "ceil" (new lower bound)
    bound: float


@dataclass(frozen=True)
class MILPProblem:
    """Box-form LP plus the indices that must land on integers."""

    lp: LPStandardForm
    integer_vars: tuple[int, ...]

    def __post_init__(self):
        lp = self.lp
        if lp.lb_row_vars is not None:
            raise MILPBuildError("expected box-form LP, bounds already folded")
        seen = set()
        for j in self.integer_vars:
            if not 0 <= j < lp.n_vars:
                raise MILPBuildError(f"integer variable index {j} out of range")
            if j in seen:
                raise MILPBuildError(f"integer variable index {j} repeated")
            seen.add(j)
            if not (np.isfinite(lp.lb[j]) and np.isfinite(lp.ub[j])):
                raise MILPBuildError(
                    f"integer variable {j} needs finite bounds to terminate")
        object.__setattr__(self, "integer_vars",
                           tuple(sorted(self.integer_vars)))


@dataclass(frozen=True)
class MILPResult:
    status: str                                # optimal|infeasible|unbounded
    objective: float | None
    primal: np.ndarray | None
    integer_values: np.ndarray | None
    node_count: int
    trail: tuple[BranchStep, ...] | None       # path of the winning node
    subproblem: LPStandardForm | None = None   # winning node's relaxation


@dataclass(frozen=True)
class NodeRecord:
    """One line of the search log (for tests and debugging)."""

    index: int
    trail: tuple[BranchStep, ...]
    status: str
    objective: float | None
    outcome: str       # branch|incumbent|rounded|pruned_bound|infeasible
    branch_var: int | None


def subproblem_for_trail(problem: MILPProblem,
                         trail: tuple[BranchStep, ...]) -> LPStandardForm:
    """The node relaxation: base LP with the trail's bounds applied."""
    lb = problem.lp.lb.copy()
    ub = problem.lp.ub.copy()
    for step in trail:
        if step.side == "floor":
            ub[step.var] = min(ub[step.var], step.bound)
        elif step.side == "ceil":
            lb[step.var] = max(lb[step.var], step.bound)
        else:
            raise ValueError(f"unknown branch side {step.side!r}")
    return replace(problem.lp, lb=lb, ub=ub)


def nearest_integer_point(node_lp, M, sol, int_idx):
    """Default repair proposal: round the integer variables in place."""
    ints = np.asarray(int_idx, dtype=int)
    z = sol.primal.copy()
    z[ints] = np.clip(np.round(z[ints]), node_lp.lb[ints], node_lp.ub[ints])
    return z


def _verified_point(node_lp, M, sol, z, int_idx, int_tol):
    """Accept a repair proposal only on direct-substitution evidence:
    integral, feasible for every node constraint, and no costlier than the
    relaxation bound (within a machine tie window). Returns None otherwise.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != sol.primal.shape or not np.all(np.isfinite(z)):
        return None
    ints = np.asarray(int_idx, dtype=int)
    if ints.size and np.max(np.abs(z[ints] - np.round(z[ints]))) > int_tol:
        return None
    obj = float(node_lp.c @ z) + node_lp.c0
    tie = 1e-9 * (1.0 + abs(sol.objective))
    if obj > sol.objective + tie:
        return None
    b_f = node_lp.b_f(M)
    b_h = node_lp.b_h(M)
    feas = 1e-8 * (1.0 + max(
        float(np.max(np.abs(b_f), initial=0.0)),
        float(np.max(np.abs(b_h), initial=0.0)),
        float(np.max(np.abs(z), initial=0.0))))
    if node_lp.n_ineq and np.max(node_lp.A_f @ z - b_f) > feas:
        return None
    if node_lp.n_eq and np.max(np.abs(node_lp.A_h @ z - b_h)) > feas:
        return None
    if np.any(z < node_lp.lb - feas) or np.any(z > node_lp.ub + feas):
        return None
    return z


def _search(problem, M, engine, int_tol, max_nodes, node_log, on_incumbent,
            round_repair=False):
    M = np.asarray(M, dtype=float)
    int_idx = list(problem.integer_vars)
    stack: list[tuple[BranchStep, ...]] = [()]
    best_obj = math.inf
    best: tuple | None = None
    grad = None
    count = 0
    while stack:
        if count >= max_nodes:
            raise NodeLimitError(f"node budget {max_nodes} exhausted")
        trail = stack.pop()
        count += 1
        node_lp = subproblem_for_trail(problem, trail)
        sol = solve_lp(node_lp, M, engine=engine)
        if sol.status == "unbounded":
            return MILPResult(status="unbounded", objective=None, primal=None,
                              integer_values=None, node_count=count,
                              trail=None), None
        if sol.status != "optimal":
            _log(node_log, count, trail, sol.status, None, "infeasible", None)
            continue
        if not sol.objective < best_obj:
            _log(node_log, count, trail, sol.status, sol.objective,
                 "pruned_bound", None)
            continue
        vals = sol.primal[int_idx] if int_idx else np.zeros(0)
        frac = np.abs(vals - np.round(vals))
        loose = np.flatnonzero(frac > int_tol)
        if loose.size == 0:
            best_obj = sol.objective
            best = (sol, trail)
            if on_incumbent is not None:
                grad = on_incumbent(node_lp, sol)
            _log(node_log, count, trail, sol.status, sol.objective,
                 "incumbent", None)
            continue
        if round_repair:
            propose = (round_repair if callable(round_repair)
                       else nearest_integer_point)
            cand = propose(node_lp, M, sol, int_idx)
            z = (None if cand is None else
                 _verified_point(node_lp, M, sol, cand, int_idx, int_tol))
            if z is not None:
                obj = float(node_lp.c @ z) + node_lp.c0
                if obj < best_obj:
                    best_obj = obj
                    best = (replace(sol, primal=z, objective=obj), trail)
                    if on_incumbent is not None:
                        grad = on_incumbent(node_lp, sol)
                _log(node_log, count, trail, sol.status, obj, "rounded", None)
                continue
        j = int_idx[loose[0]]
        v = sol.primal[j]
        _log(node_log, count, trail, sol.status, sol.objective, "branch", j)
        stack.append(trail + (BranchStep(j, "ceil", float(math.ceil(v))),))
        stack.append(trail + (BranchStep(j, "floor", float(math.floor(v))),))
    if best is None:
        return MILPResult(status="infeasible", objective=None, primal=None,
                          integer_values=None, node_count=count,
                          trail=None), None
    sol, trail = best
    ints = np.round(sol.primal[int_idx]).astype(float)
    return MILPResult(status="optimal", objective=sol.objective,
                      primal=sol.primal, integer_values=ints,
                      node_count=count, trail=trail,
                      subproblem=subproblem_for_trail(problem, trail)), grad


def _log(node_log, index, trail, status, objective, outcome, branch_var):
    if node_log is not None:
        node_log.append(NodeRecord(index=index, trail=trail, status=status,
                                   objective=objective, outcome=outcome,
                                   branch_var=branch_var))


def branch_and_bound(problem: MILPProblem, M: np.ndarray,
                     engine: str = "bland", int_tol: float = INT_TOL,
                     max_nodes: int = MAX_NODES,
                     node_log: list | None = None,
                     round_repair=False) -> MILPResult:
    """Solve the integer-constrained problem at parameter vector ``M``.

    ``round_repair``: False (plain search), True (nearest-integer repair
    proposals), or a callable proposal (see module docstring).
    """
    result, _ = _search(problem, M, engine, int_tol, max_nodes, node_log,
                        None, round_repair)
    return result


def _node_gradient(node_lp, M, sol, method) -> GradientResult:
    if method == "auto":
        folded = node_lp.fold_bounds()
        dim = folded.n_vars + folded.n_ineq + folded.n_eq
        method = "kkt" if dim <= KKT_AUTO_LIMIT else "envelope"
    if method == "envelope":
        return dual_gradient_result(node_lp, sol)
    if method == "kkt":
        return cost_gradient(node_lp, M, sol)
    raise ValueError(f"unknown gradient method {method!r}")


def embedded_gradient(problem: MILPProblem, M: np.ndarray,
                      engine: str = "bland", method: str = "auto",
                      int_tol: float = INT_TOL, max_nodes: int = MAX_NODES,
                      node_log: list | None = None,
                      round_repair=False
                      ) -> tuple[MILPResult, GradientResult | None]:
    """Search while differentiating every incumbent; keep the last gradient.

    Returns ``(result, gradient)``; the gradient is None when the search
    ends without an incumbent. A rounded incumbent differentiates its node's
    relaxation, the same LP the two-stage route re-solves.
    """
    M = np.asarray(M, dtype=float)

    def hook(node_lp, sol):
        return _node_gradient(node_lp, M, sol, method)

    return _search(problem, M, engine, int_tol, max_nodes, node_log, hook,
                   round_repair)


def backward_optimal_subproblem(result: MILPResult, M: np.ndarray,
                                engine: str = "bland",
                                method: str = "auto") -> GradientResult:
    """Differentiate a finished search: re-solve the winning node's
    relaxation (branching bounds pinned), then take its cost slope."""
    if result.status != "optimal":
        raise ValueError(f"cannot differentiate a {result.status!r} result")
    if result.subproblem is None:
        raise ValueError("result carries no winning-node relaxation")
    M = np.asarray(M, dtype=float)
    sol = solve_lp(result.subproblem, M, engine=engine)
    if sol.status != "optimal":
        raise RuntimeError(
            f"winning node failed to re-solve (status {sol.status})")
    return _node_gradient(result.subproblem, M, sol, method)


def enumerate_integer_assignments(problem: MILPProblem, M: np.ndarray,
                                  engine: str = "bland",
                                  max_assignments: int = MAX_ASSIGNMENTS
                                  ) -> MILPResult:
    """Brute-force reference: try every integer assignment, keep the best.

    Assignments are visited in lexicographic order over ascending variable
    index; among objectives tied within machine precision the first one seen
    is kept, which makes the reported assignment deterministic.
    """
    lp = problem.lp
    M = np.asarray(M, dtype=float)
    ranges = []
    for j in problem.integer_vars:
        lo = math.ceil(lp.lb[j] - INT_TOL)
        hi = math.floor(lp.ub[j] + INT_TOL)
        if hi < lo:
            return MILPResult(status="infeasible", objective=None, primal=None,
                              integer_values=None, node_count=0, trail=None)
        ranges.append(range(lo, hi + 1))
    total = math.prod(len(r) for r in ranges)
    if total > max_assignments:
        raise ValueError(
            f"{total} integer assignments exceed the cap {max_assignments}")
    best_obj = math.inf
    best: tuple | None = None
    count = 0
    for combo in itertools.product(*ranges):
        count += 1
        lb = lp.lb.copy()
        ub = lp.ub.copy()
        for j, val in zip(problem.integer_vars, combo):
            lb[j] = ub[j] = float(val)
        sol = solve_lp(replace(lp, lb=lb, ub=ub), M, engine=engine)
        if sol.status == "unbounded":
            return MILPResult(status="unbounded", objective=None, primal=None,
                              integer_values=None, node_count=count,
                              trail=None)
        if sol.status != "optimal":
            continue
        tie = 1e-12 * (1.0 + abs(best_obj) if math.isfinite(best_obj) else 1.0)
        if sol.objective < best_obj - tie:
            best_obj = sol.objective
            best = (sol, combo)
    if best is None:
        return MILPResult(status="infeasible", objective=None, primal=None,
                          integer_values=None, node_count=count, trail=None)
    sol, combo = best
    return MILPResult(status="optimal", objective=sol.objective,
                      primal=sol.primal,
                      integer_values=np.array(combo, dtype=float),
                      node_count=count, trail=None)
