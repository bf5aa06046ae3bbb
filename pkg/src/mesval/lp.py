"""Parametric linear programs in a canonical form, with two solver engines.

Canonical form
--------------
    minimize    c.z + c0
    subject to  f(z, M) = A_f z - b_f(M) <= 0
                h(z, M) = A_h z - b_h(M)  = 0
                lb <= z <= ub

The right-hand sides are affine in a parameter vector M:
``b_f(M) = b_f0 + B_f M`` and ``b_h(M) = b_h0 + B_h M``; the jacobians
``B_f = d b_f / d M`` and ``B_h = d b_h / d M`` are constant. The matrices
``A_f``/``A_h`` never depend on M, and neither does the objective.

Dual convention
---------------
Solutions carry multipliers for the *folded* inequality set (declared rows
first, then ``-z_j <= -lb_j`` rows, then ``z_j <= ub_j`` rows; see
:meth:`LPStandardForm.fold_bounds`). They satisfy the Lagrangian convention

    L(z, lam, mu) = c.z + lam.f(z, M) + mu.h(z, M),    lam >= 0,

so stationarity reads ``c + A_f' lam + A_h' mu = 0`` and the optimal value
responds to the RHS parameters as ``dC*/dM = -(lam' B_f + mu' B_h)``.

Engines
-------
``engine="bland"`` (default): dense two-phase tableau simplex with Bland's
smallest-index rule, fixed variable ordering and no randomization, so repeated
solves of identical inputs are bit-identical. Intended for desk-scale
instances; this is also the engine whose pivoting the tests pin down.

``engine="highs"``: scipy.optimize.linprog (HiGHS) behind the same contract,
with duals remapped onto the folded rows. Used for the larger dispatch
problems where a dense tableau would be needlessly slow. Deterministic for
identical inputs as well.

Infeasible and unbounded problems are reported through
:attr:`LPSolution.status`, never as exceptions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LinearProgram",
    "LPStandardForm",
    "LPSolution",
    "KktReport",
    "LPBuildError",
    "LPNumericalError",
    "to_standard_form",
    "solve_lp",
    "check_kkt",
    "DEFAULT_TOL",
    "PIVOT_TOL",
]

DEFAULT_TOL = 1e-8
PIVOT_TOL = 1e-10

_SENSES = ("<=", ">=", "==")


class LPBuildError(ValueError):
    """Malformed structured program (bad names, senses, bounds, NaNs)."""


class LPNumericalError(RuntimeError):
    """Numerical breakdown inside a solver engine."""


class LPEvaluationError(RuntimeError):
    """A solve that was required to succeed came back infeasible/unbounded."""


# ---------------------------------------------------------------------------
# structured description
# ---------------------------------------------------------------------------

class LinearProgram:
    """Structured LP description: named variables, rows, parameter slots.

    Rows may be "<=", ">=" or "=="; ">=" rows are negated into "<=" during
    canonicalization. Each row's RHS is ``rhs + sum(coef * M[slot])`` over its
    ``params`` entries. Variables and rows keep declaration order, which fixes
    the canonical column/row order deterministically.
    """

    def __init__(self) -> None:
        self._vars: list[tuple[str, float, float, float]] = []
        self._var_index: dict[str, int] = {}
        self._params: list[str] = []
        self._param_index: dict[str, int] = {}
        self._rows: list[tuple[str, dict[str, float], str, float, dict[str, float]]] = []
        self._row_names: set[str] = set()
        self._constant: float = 0.0

    def add_constant(self, value: float) -> None:
        """Add a fixed offset to the objective (accumulates)."""
        if not np.isfinite(value):
            raise LPBuildError("non-finite objective constant")
        self._constant += float(value)

    def add_param(self, name: str) -> int:
        if name in self._param_index:
            raise LPBuildError(f"duplicate parameter name {name!r}")
        self._param_index[name] = len(self._params)
        self._params.append(name)
        return self._param_index[name]

    def add_var(self, name: str, lb: float | None = None,
                ub: float | None = None, cost: float = 0.0) -> int:
        if name in self._var_index:
            raise LPBuildError(f"duplicate variable name {name!r}")
        lo = -np.inf if lb is None else float(lb)
        hi = np.inf if ub is None else float(ub)
        if not np.isfinite(cost):
            raise LPBuildError(f"non-finite cost for {name!r}")
        if np.isnan(lo) or np.isnan(hi) or lo > hi:
            raise LPBuildError(f"bad bounds for {name!r}: [{lo}, {hi}]")
        self._var_index[name] = len(self._vars)
        self._vars.append((name, lo, hi, float(cost)))
        return self._var_index[name]

    def add_constraint(self, coeffs: dict[str, float], sense: str, rhs: float,
                       params: dict[str, float] | None = None,
                       name: str | None = None) -> None:
        if sense not in _SENSES:
            raise LPBuildError(f"unknown sense {sense!r}")
        if name is None:
            name = f"row{len(self._rows)}"
        if name in self._row_names:
            raise LPBuildError(f"duplicate row name {name!r}")
        clean = {}
        for var, coef in coeffs.items():
            if var not in self._var_index:
                raise LPBuildError(f"row {name!r} references unknown variable {var!r}")
            if not np.isfinite(coef):
                raise LPBuildError(f"row {name!r}: non-finite coefficient on {var!r}")
            clean[var] = float(coef)
        pclean = {}
        for slot, coef in (params or {}).items():
            if slot not in self._param_index:
                raise LPBuildError(f"row {name!r} references unknown parameter {slot!r}")
            if not np.isfinite(coef):
                raise LPBuildError(f"row {name!r}: non-finite parameter coefficient")
            pclean[slot] = float(coef)
        if not np.isfinite(rhs):
            raise LPBuildError(f"row {name!r}: non-finite RHS")
        self._row_names.add(name)
        self._rows.append((name, clean, sense, float(rhs), pclean))

    @property
    def n_vars(self) -> int:
        return len(self._vars)

    @property
    def param_dim(self) -> int:
        return len(self._params)

    def var_id(self, name: str) -> int:
        return self._var_index[name]


# ---------------------------------------------------------------------------
# canonical form
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LPStandardForm:
    """Canonical parametric LP (see module docstring for conventions)."""

    c: np.ndarray
    c0: float
    A_f: np.ndarray
    b_f0: np.ndarray
    B_f: np.ndarray
    A_h: np.ndarray
    b_h0: np.ndarray
    B_h: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    var_names: tuple[str, ...] = ()
    ineq_names: tuple[str, ...] = ()
    eq_names: tuple[str, ...] = ()
    param_names: tuple[str, ...] = ()
    # set on folded forms only: var index behind each appended bound row
    lb_row_vars: np.ndarray | None = None
    ub_row_vars: np.ndarray | None = None

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.A_f.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A_h.shape[0]

    @property
    def param_dim(self) -> int:
        return self.B_f.shape[1]

    def b_f(self, M: np.ndarray) -> np.ndarray:
        return self.b_f0 + self.B_f @ np.asarray(M, dtype=float)

    def b_h(self, M: np.ndarray) -> np.ndarray:
        return self.b_h0 + self.B_h @ np.asarray(M, dtype=float)

    def fold_bounds(self) -> "LPStandardForm":
        """Bounds rewritten as inequality rows.

        Row order: declared inequality rows, then ``-z_j <= -lb_j`` for every
        finite lower bound (ascending j), then ``z_j <= ub_j`` for every
        finite upper bound (ascending j). Bound rows have zero parameter
        jacobian. ``lb_row_vars``/``ub_row_vars`` record which variable each
        appended row constrains. Idempotent on already-folded forms.
        """
        if self.lb_row_vars is not None:
            return self
        n = self.n_vars
        lo_idx = np.flatnonzero(np.isfinite(self.lb))
        hi_idx = np.flatnonzero(np.isfinite(self.ub))
        rows = [self.A_f]
        rhs = [self.b_f0]
        names = list(self.ineq_names)
        if lo_idx.size:
            E = np.zeros((lo_idx.size, n))
            E[np.arange(lo_idx.size), lo_idx] = -1.0
            rows.append(E)
            rhs.append(-self.lb[lo_idx])
            names += [f"_lb[{self.var_names[j] if self.var_names else j}]"
                      for j in lo_idx]
        if hi_idx.size:
            E = np.zeros((hi_idx.size, n))
            E[np.arange(hi_idx.size), hi_idx] = 1.0
            rows.append(E)
            rhs.append(self.ub[hi_idx])
            names += [f"_ub[{self.var_names[j] if self.var_names else j}]"
                      for j in hi_idx]
        A_f = np.vstack(rows)
        b_f0 = np.concatenate(rhs)
        B_f = np.vstack([self.B_f,
                         np.zeros((lo_idx.size + hi_idx.size, self.param_dim))])
        free = np.full(n, -np.inf), np.full(n, np.inf)
        return LPStandardForm(
            c=self.c, c0=self.c0, A_f=A_f, b_f0=b_f0, B_f=B_f,
            A_h=self.A_h, b_h0=self.b_h0, B_h=self.B_h,
            lb=free[0], ub=free[1],
            var_names=self.var_names, ineq_names=tuple(names),
            eq_names=self.eq_names, param_names=self.param_names,
            lb_row_vars=lo_idx, ub_row_vars=hi_idx)


def to_standard_form(prog: LinearProgram) -> LPStandardForm:
    """Canonicalize a structured description (deterministic ordering)."""
    n = prog.n_vars
    p = prog.param_dim
    var_names = tuple(name for name, *_ in prog._vars)
    lb = np.array([v[1] for v in prog._vars], dtype=float)
    ub = np.array([v[2] for v in prog._vars], dtype=float)
    c = np.array([v[3] for v in prog._vars], dtype=float)
    ineq_rows, ineq_rhs, ineq_par, ineq_names = [], [], [], []
    eq_rows, eq_rhs, eq_par, eq_names = [], [], [], []
    for name, coeffs, sense, rhs, params in prog._rows:
        a = np.zeros(n)
        for var, coef in coeffs.items():
            a[prog._var_index[var]] = coef
        pr = np.zeros(p)
        for slot, coef in params.items():
            pr[prog._param_index[slot]] = coef
        if sense == ">=":
            a, rhs, pr = -a, -rhs, -pr
            sense = "<="
        if sense == "<=":
            ineq_rows.append(a)
            ineq_rhs.append(rhs)
            ineq_par.append(pr)
            ineq_names.append(name)
        else:
            eq_rows.append(a)
            eq_rhs.append(rhs)
            eq_par.append(pr)
            eq_names.append(name)
    A_f = np.array(ineq_rows, dtype=float).reshape(len(ineq_rows), n)
    A_h = np.array(eq_rows, dtype=float).reshape(len(eq_rows), n)
    return LPStandardForm(
        c=c, c0=prog._constant,
        A_f=A_f, b_f0=np.array(ineq_rhs, dtype=float),
        B_f=np.array(ineq_par, dtype=float).reshape(len(ineq_rows), p),
        A_h=A_h, b_h0=np.array(eq_rhs, dtype=float),
        B_h=np.array(eq_par, dtype=float).reshape(len(eq_rows), p),
        lb=lb, ub=ub, var_names=var_names,
        ineq_names=tuple(ineq_names), eq_names=tuple(eq_names),
        param_names=tuple(prog._params))


# ---------------------------------------------------------------------------
# solutions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LPSolution:
    """Solver output. Duals index the folded inequality rows (see module doc).

    ``basis`` is the Bland engine's basic column set (internal standard-form
    numbering) or, for the HiGHS engine, an active-set surrogate: the sorted
    variables strictly between their bounds. Either way it is deterministic
    and usable as a "did the active set move" fingerprint.
    """

    status: str
    primal: np.ndarray | None
    ineq_duals: np.ndarray | None
    eq_duals: np.ndarray | None
    objective: float | None
    basis: tuple[int, ...] | None


# ---------------------------------------------------------------------------
# Bland-rule tableau engine
# ---------------------------------------------------------------------------

def _pivot(T: np.ndarray, basis: np.ndarray, i: int, j: int) -> None:
    T[i] /= T[i, j]
    col = T[:, j].copy()
    col[i] = 0.0
    T -= np.outer(col, T[i])
    T[:, j] = 0.0
    T[i, j] = 1.0
    basis[i] = j


def _bland_loop(T, basis, cost, allowed, tol, pivot_tol, max_iter, refresh):
    """Run Bland iterations in place. Returns 'optimal' or 'unbounded'."""
    N = T.shape[1] - 1
    retried = False
    for _ in range(max_iter):
        red = cost - cost[basis] @ T[:, :N]
        red[basis] = 0.0
        cand = np.flatnonzero(allowed & (red < -tol))
        if cand.size == 0:
            return "optimal"
        j = int(cand[0])
        col = T[:, j]
        pos = col > pivot_tol
        if not pos.any():
            if (col > 0.0).any() and not retried:
                refresh(T, basis)  # tiny pivots only: rebuild and retry once
                retried = True
                continue
            return "unbounded"
        ratios = np.where(pos, T[:, -1] / np.where(pos, col, 1.0), np.inf)
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + 1e-12 * (1.0 + abs(best)))
        i = int(ties[np.argmin(basis[ties])])
        _pivot(T, basis, i, j)
        retried = False
    raise LPNumericalError("simplex iteration limit exceeded")


def _solve_bland(lp: LPStandardForm, M: np.ndarray,
                 max_iter: int = 200_000) -> LPSolution:
    folded = lp.fold_bounds()
    q = folded.n_ineq
    m = folded.n_eq
    n = folded.n_vars
    b_f = folded.b_f(M)
    b_h = folded.b_h(M)
    b = np.concatenate([b_f, b_h])
    rows = q + m

    # columns: z+ (n) | z- (n) | slack (q) | artificials (eq rows and
    # negative-RHS ineq rows). Artificial coefficient is sign(b_i) so the
    # initial basic value is |b_i|.
    art_rows = [i for i in range(rows) if i >= q or b[i] < 0.0]
    n_art = len(art_rows)
    N = 2 * n + q + n_art
    D = np.zeros((rows, N + 1))
    D[:q, :n] = folded.A_f
    D[:q, n:2 * n] = -folded.A_f
    D[q:, :n] = folded.A_h
    D[q:, n:2 * n] = -folded.A_h
    D[np.arange(q), 2 * n + np.arange(q)] = 1.0
    art_col_of_row = {}
    for k, i in enumerate(art_rows):
        jcol = 2 * n + q + k
        D[i, jcol] = 1.0 if b[i] >= 0.0 else -1.0
        art_col_of_row[i] = jcol
    D[:, -1] = b

    art_mask = np.zeros(N, dtype=bool)
    art_mask[2 * n + q:] = True
    allowed = ~art_mask

    basis = np.empty(rows, dtype=int)
    for i in range(rows):
        basis[i] = art_col_of_row.get(i, 2 * n + i)

    T = D.copy()
    neg = T[:, -1] < 0.0  # rows whose initial basic column has coefficient -1
    T[neg] *= -1.0

    def refresh(T_, basis_):
        B = D[:, basis_]
        try:
            T_[:] = np.linalg.solve(B, D)
        except np.linalg.LinAlgError as exc:
            raise LPNumericalError("basis matrix became singular") from exc

    tol = 1e-9
    if n_art:
        cost1 = np.zeros(N)
        cost1[art_mask] = 1.0
        status = _bland_loop(T, basis, cost1, allowed, tol, PIVOT_TOL,
                             max_iter, refresh)
        if status != "optimal":
            raise LPNumericalError("phase-1 subproblem unbounded")
        phase1_obj = float(cost1[basis] @ T[:, -1])
        if phase1_obj > DEFAULT_TOL * (1.0 + float(np.abs(b).max(initial=0.0))):
            return LPSolution("infeasible", None, None, None, None, None)
        # drive leftover artificials out of the basis (degenerate pivots)
        dead_rows = []
        for i in range(rows):
            if not art_mask[basis[i]]:
                continue
            cands = np.flatnonzero(~art_mask & (np.abs(T[i, :N]) > PIVOT_TOL))
            if cands.size:
                _pivot(T, basis, i, int(cands[0]))
            else:
                dead_rows.append(i)  # dependent row, implied by the others
        if dead_rows:
            keep = np.setdiff1d(np.arange(T.shape[0]), dead_rows)
            T = T[keep]
            basis = basis[keep]

    cost2 = np.zeros(N)
    cost2[:n] = folded.c
    cost2[n:2 * n] = -folded.c
    status = _bland_loop(T, basis, cost2, allowed, tol, PIVOT_TOL,
                         max_iter, refresh)
    if status == "unbounded":
        return LPSolution("unbounded", None, None, None, None, None)

    values = np.zeros(N)
    values[basis] = T[:, -1]
    z = values[:n] - values[n:2 * n]

    # duals from final reduced costs: y_r = -red[unit column of row r] / sign
    red = cost2 - cost2[basis] @ T[:, :N]
    red[basis] = 0.0
    y = np.zeros(rows)
    for r in range(rows):
        if r in art_col_of_row:
            sign = 1.0 if b[r] >= 0.0 else -1.0
            y[r] = -red[art_col_of_row[r]] / sign
        else:
            y[r] = -red[2 * n + r]
    lam = -y[:q]
    mu = -y[q:]
    objective = float(folded.c @ z) + folded.c0
    return LPSolution("optimal", z, lam, mu, objective,
                      tuple(int(v) for v in sorted(basis)))


# ---------------------------------------------------------------------------
# HiGHS engine
# ---------------------------------------------------------------------------

_HIGHS_OPTIONS = {
    "presolve": True,
    "primal_feasibility_tolerance": 1e-10,
    "dual_feasibility_tolerance": 1e-10,
}


def _solve_highs(lp: LPStandardForm, M: np.ndarray) -> LPSolution:
    from scipy.optimize import linprog

    q = lp.n_ineq
    m = lp.n_eq
    res = linprog(
        lp.c,
        A_ub=lp.A_f if q else None, b_ub=lp.b_f(M) if q else None,
        A_eq=lp.A_h if m else None, b_eq=lp.b_h(M) if m else None,
        bounds=list(zip(lp.lb, lp.ub)),
        method="highs", options=dict(_HIGHS_OPTIONS))
    if res.status == 2:
        return LPSolution("infeasible", None, None, None, None, None)
    if res.status == 3:
        return LPSolution("unbounded", None, None, None, None, None)
    if res.status != 0:
        raise LPNumericalError(f"linprog failed: {res.message}")

    folded = lp.fold_bounds()
    lam = np.zeros(folded.n_ineq)
    if q:
        lam[:q] = -res.ineqlin.marginals
    n_lb = folded.lb_row_vars.size
    if n_lb:
        lam[q:q + n_lb] = np.maximum(res.lower.marginals[folded.lb_row_vars], 0.0)
    if folded.ub_row_vars.size:
        lam[q + n_lb:] = np.maximum(-res.upper.marginals[folded.ub_row_vars], 0.0)
    lam[:q] = np.maximum(lam[:q], 0.0)
    mu = -res.eqlin.marginals if m else np.zeros(0)
    z = np.asarray(res.x, dtype=float)
    interior = (z > lp.lb + 1e-9) & (z < lp.ub - 1e-9)
    return LPSolution("optimal", z, lam, mu, float(res.fun) + lp.c0,
                      tuple(int(j) for j in np.flatnonzero(interior)))


def solve_lp(lp: LPStandardForm, M: np.ndarray,
             engine: str = "bland") -> LPSolution:
    """Solve the LP at parameter value M. Statuses, never exceptions, for
    infeasible/unbounded instances."""
    M = np.asarray(M, dtype=float)
    if M.shape != (lp.param_dim,):
        raise ValueError(f"M has shape {M.shape}, expected ({lp.param_dim},)")
    if engine == "bland":
        return _solve_bland(lp, M)
    if engine == "highs":
        return _solve_highs(lp, M)
    raise ValueError(f"unknown engine {engine!r}")


# ---------------------------------------------------------------------------
# KKT residual report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KktReport:
    """Worst-case residuals of the five optimality condition groups plus the
    primal/dual objective gap, each compared against tol * (1 + |C*|)."""

    ok: bool
    primal_ineq: float
    primal_eq: float
    dual_nonneg: float
    complementarity: float
    stationarity: float
    gap: float
    scale: float
    tol: float

    def __str__(self) -> str:  # compact diagnostic line
        return ("KKT(ok={0}, f+={1:.2e}, |h|={2:.2e}, lam-={3:.2e}, "
                "comp={4:.2e}, stat={5:.2e}, gap={6:.2e})").format(
                    self.ok, self.primal_ineq, self.primal_eq,
                    self.dual_nonneg, self.complementarity,
                    self.stationarity, self.gap)


def check_kkt(lp: LPStandardForm, M: np.ndarray, sol: LPSolution,
              tol: float = DEFAULT_TOL) -> KktReport:
    """Evaluate KKT residuals of an optimal-status solution on the folded form."""
    if sol.status != "optimal":
        raise ValueError(f"cannot check a solution with status {sol.status!r}")
    folded = lp.fold_bounds()
    M = np.asarray(M, dtype=float)
    z = sol.primal
    lam = sol.ineq_duals
    mu = sol.eq_duals
    f = folded.A_f @ z - folded.b_f(M)
    h = folded.A_h @ z - folded.b_h(M) if folded.n_eq else np.zeros(0)
    stat = folded.c + folded.A_f.T @ lam
    if folded.n_eq:
        stat = stat + folded.A_h.T @ mu
    primal_obj = float(folded.c @ z)
    dual_obj = -float(lam @ folded.b_f(M))
    if folded.n_eq:
        dual_obj -= float(mu @ folded.b_h(M))
    scale = 1.0 + abs(primal_obj)
    rep = {
        "primal_ineq": float(np.maximum(f, 0.0).max(initial=0.0)),
        "primal_eq": float(np.abs(h).max(initial=0.0)),
        "dual_nonneg": float(np.maximum(-lam, 0.0).max(initial=0.0)),
        "complementarity": float(np.abs(lam * f).max(initial=0.0)),
        "stationarity": float(np.abs(stat).max(initial=0.0)),
        "gap": abs(primal_obj - dual_obj),
    }
    ok = all(v <= tol * scale for v in rep.values())
    return KktReport(ok=ok, scale=scale, tol=tol, **rep)
