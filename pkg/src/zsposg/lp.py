"""Linear programs and zero-sum matrix games.

The simplex/interior-point work is delegated to HiGHS through
:func:`scipy.optimize.linprog`; this module fixes the data contract,
recovers duals and checks the optimality certificates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

FEAS_TOL = 1e-7
DUAL_TOL = 1e-6

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL = "numerical_failure"


class LpError(RuntimeError):
    pass


@dataclass
class LinearProgram:
    """``sense`` objective subject to rows ``(coeffs, rel, rhs)``.

    ``rel`` is one of ``"<="``, ``"="``, ``">="``.  ``bounds`` holds one
    ``(lower, upper)`` pair per variable; ``None`` means unbounded.
    """

    objective: np.ndarray
    sense: str = "max"
    constraints: list = field(default_factory=list)
    bounds: list | None = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        if self.sense not in ("max", "min"):
            raise ValueError("sense must be 'max' or 'min'")
        n = self.objective.size
        for coeffs, rel, rhs in self.constraints:
            if np.asarray(coeffs).shape != (n,):
                raise ValueError("constraint width differs from objective")
            if rel not in ("<=", "=", ">="):
                raise ValueError(f"unknown relation {rel!r}")
            if not np.isfinite(rhs):
                raise ValueError("constraint rhs must be finite")
        if self.bounds is None:
            self.bounds = [(0.0, None)] * n
        if len(self.bounds) != n:
            raise ValueError("one bound pair per variable expected")

    def add(self, coeffs, rel, rhs):
        self.constraints.append((np.asarray(coeffs, dtype=float), rel, float(rhs)))


@dataclass
class LpSolution:
    status: str
    objective: float = float("nan")
    primal: np.ndarray | None = None
    dual: np.ndarray | None = None

    @property
    def optimal(self):
        return self.status == OPTIMAL


def solve_lp(lp: LinearProgram) -> LpSolution:
    """Solve a dense :class:`LinearProgram`.

    Duals follow the sign convention of the stated sense: for a max
    problem a binding ``<=`` row has a nonnegative dual and the dual
    objective ``rhs . dual`` (plus bound terms) equals the primal one.
    """
    n = lp.objective.size
    ub_rows, ub_rhs, eq_rows, eq_rhs, where = [], [], [], [], []
    for k, (coeffs, rel, rhs) in enumerate(lp.constraints):
        if rel == "=":
            where.append(("eq", len(eq_rows), 1.0))
            eq_rows.append(coeffs)
            eq_rhs.append(rhs)
        else:
            sign = 1.0 if rel == "<=" else -1.0
            where.append(("ub", len(ub_rows), sign))
            ub_rows.append(sign * np.asarray(coeffs))
            ub_rhs.append(sign * rhs)
    a_ub = np.array(ub_rows).reshape(-1, n) if ub_rows else None
    a_eq = np.array(eq_rows).reshape(-1, n) if eq_rows else None
    res = solve_arrays(
        lp.objective,
        lp.sense,
        a_ub,
        np.array(ub_rhs) if ub_rows else None,
        a_eq,
        np.array(eq_rhs) if eq_rows else None,
        lp.bounds,
    )
    if not res.optimal:
        return res
    ub_dual, eq_dual = res.dual
    dual = np.empty(len(lp.constraints))
    for k, (kind, idx, sign) in enumerate(where):
        dual[k] = eq_dual[idx] if kind == "eq" else sign * ub_dual[idx]
    res.dual = dual
    return res


def solve_arrays(c, sense, a_ub, b_ub, a_eq, b_eq, bounds, attempts=2) -> LpSolution:
    """Array-level entry point used by the hot loops.

    Accepts dense or scipy-sparse matrices.  Returns duals as the pair
    ``(ub_duals, eq_duals)`` in the convention of ``sense``.
    """
    c = np.asarray(c, dtype=float)
    flip = -1.0 if sense == "max" else 1.0
    options = [
        {"method": "highs-ds", "options": {"presolve": True}},
        {"method": "highs-ipm", "options": {"presolve": True}},
        {"method": "highs-ds", "options": {"presolve": False}},
    ]
    last = None
    for opt in options[: max(1, attempts + 1)]:
        res = linprog(
            flip * c,
            A_ub=a_ub,
            b_ub=b_ub,
            A_eq=a_eq,
            b_eq=b_eq,
            bounds=bounds,
            method=opt["method"],
            options=opt["options"],
        )
        last = res
        if res.status == 0:
            # marginals are sensitivities of the minimized objective flip*c
            ub = flip * res.ineqlin.marginals if a_ub is not None else np.zeros(0)
            eq = flip * res.eqlin.marginals if a_eq is not None else np.zeros(0)
            return LpSolution(OPTIMAL, float(c @ res.x), np.asarray(res.x), (ub, eq))
        if res.status == 2:
            return LpSolution(INFEASIBLE)
        if res.status == 3:
            return LpSolution(UNBOUNDED)
    return LpSolution(NUMERICAL, primal=None if last is None else last.x)


def certificate_gaps(lp: LinearProgram, sol: LpSolution) -> dict:
    """Primal infeasibility, duality gap and complementary slackness of ``sol``.

    Variable bounds are folded into the dual through reduced costs, so the
    check applies to any bounds, not just nonnegativity.
    """
    x = sol.primal
    rows = np.array([c for c, _, _ in lp.constraints]).reshape(-1, x.size)
    rhs = np.array([b for _, _, b in lp.constraints])
    rel = [r for _, r, _ in lp.constraints]
    act = rows @ x if len(rhs) else np.zeros(0)
    infeas = 0.0
    for a, b, r in zip(act, rhs, rel):
        if r == "<=":
            infeas = max(infeas, a - b)
        elif r == ">=":
            infeas = max(infeas, b - a)
        else:
            infeas = max(infeas, abs(a - b))
    for v, (lo, hi) in zip(x, lp.bounds):
        if lo is not None:
            infeas = max(infeas, lo - v)
        if hi is not None:
            infeas = max(infeas, v - hi)
    y = sol.dual
    reduced = lp.objective - (rows.T @ y if len(rhs) else 0.0)
    bound_term = 0.0
    for d, v, (lo, hi) in zip(reduced, x, lp.bounds):
        # the reduced cost is carried by whichever bound is active
        if abs(d) <= 1e-12:
            continue
        at_lo = lo is not None and abs(v - lo) <= 1e-7
        at_hi = hi is not None and abs(v - hi) <= 1e-7
        if at_lo and (not at_hi or abs(v - lo) <= abs(v - hi)):
            bound_term += d * lo
        elif at_hi:
            bound_term += d * hi
        else:
            bound_term += d * v
    dual_obj = float(rhs @ y + bound_term) if len(rhs) else bound_term
    slack = np.abs((act - rhs) * y) if len(rhs) else np.zeros(0)
    return {
        "primal_infeasibility": float(infeas),
        "duality_gap": abs(sol.objective - dual_obj),
        "complementary_slackness": float(slack.max()) if slack.size else 0.0,
        "dual_objective": dual_obj,
    }


def solve_matrix_game(payoff):
    """Value and optimal mixed strategies of the zero-sum game ``payoff``.

    The row player maximizes.  Returns ``(value, row_mix, col_mix)``.
    """
    a = np.asarray(payoff, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("payoff must be a non-empty matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("payoff entries must be finite")
    m, n = a.shape
    # max v  s.t.  v - sum_i x_i a_ij <= 0 for all j,  sum x = 1,  x >= 0
    c = np.zeros(m + 1)
    c[-1] = 1.0
    a_ub = np.hstack([-a.T, np.ones((n, 1))])
    a_eq = np.hstack([np.ones((1, m)), np.zeros((1, 1))])
    bounds = [(0.0, None)] * m + [(None, None)]
    sol = solve_arrays(c, "max", a_ub, np.zeros(n), a_eq, np.ones(1), bounds)
    if not sol.optimal:
        raise LpError(f"matrix game LP failed: {sol.status}")
    row = _clean_mix(sol.primal[:m])
    col = _clean_mix(sol.dual[0])
    return float(sol.objective), row, col


def _clean_mix(v):
    v = np.clip(np.asarray(v, dtype=float), 0.0, None)
    s = v.sum()
    return v / s if s > 0 else np.full(v.size, 1.0 / v.size)
