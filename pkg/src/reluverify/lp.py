"""Dense two-phase simplex for small bounded linear programs."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

FEAS_TOL = 1e-7
OPT_TOL = 1e-9
PIVOT_TOL = 1e-9
MAX_PIVOTS = 50_000


class Relation(str, enum.Enum):
    LE = "<="
    GE = ">="
    EQ = "="

    def holds(self, lhs: float, rhs: float, tol: float = 0.0) -> bool:
        if self is Relation.LE:
            return lhs <= rhs + tol
        if self is Relation.GE:
            return lhs >= rhs - tol
        return abs(lhs - rhs) <= tol


@dataclass(frozen=True, eq=False)
class Constraint:
    coeffs: np.ndarray
    relation: Relation
    rhs: float

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.float64).reshape(-1)
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "relation", Relation(self.relation))
        object.__setattr__(self, "rhs", float(self.rhs))

    def satisfied(self, x, tol: float = FEAS_TOL) -> bool:
        return self.relation.holds(float(self.coeffs @ x), self.rhs, tol)


@dataclass(frozen=True, eq=False)
class LinearProgram:
    """``min``/``max`` of ``objective . x`` subject to rows and finite variable bounds."""

    objective: np.ndarray
    constraints: tuple
    var_lo: np.ndarray
    var_hi: np.ndarray
    sense: str = "min"

    def __post_init__(self):
        obj = np.array(self.objective, dtype=np.float64).reshape(-1)
        lo = np.array(self.var_lo, dtype=np.float64).reshape(-1)
        hi = np.array(self.var_hi, dtype=np.float64).reshape(-1)
        m = obj.shape[0]
        if lo.shape != (m,) or hi.shape != (m,):
            raise ValueError(f"variable bounds must have length {m}")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("variable bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("variable lower bound exceeds upper bound")
        if self.sense not in ("min", "max"):
            raise ValueError(f"sense must be 'min' or 'max', got {self.sense!r}")
        cons = tuple(self.constraints)
        for k, c in enumerate(cons):
            if c.coeffs.shape != (m,):
                raise ValueError(f"constraint {k} has {c.coeffs.shape[0]} coefficients, expected {m}")
            if not (np.all(np.isfinite(c.coeffs)) and np.isfinite(c.rhs)):
                raise ValueError(f"constraint {k} has non-finite entries")
        for name, arr in (("objective", obj), ("var_lo", lo), ("var_hi", hi)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "constraints", cons)

    @property
    def n_vars(self) -> int:
        return self.objective.shape[0]

    def satisfied_by(self, x, tol: float = FEAS_TOL) -> bool:
        x = np.asarray(x, dtype=np.float64)
        if np.any(x < self.var_lo - tol) or np.any(x > self.var_hi + tol):
            return False
        return all(c.satisfied(x, tol) for c in self.constraints)

    def with_objective(self, objective, sense: str = "min") -> "LinearProgram":
        return LinearProgram(objective, self.constraints, self.var_lo, self.var_hi, sense)


class LpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration_limit"


@dataclass(frozen=True, eq=False)
class LpOutcome:
    status: LpStatus
    solution: Optional[np.ndarray] = None
    value: Optional[float] = None
    pivots: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


class SolverFailure(RuntimeError):
    """The simplex hit its pivot cap; the LP's status is unknown."""


class _IterationLimit(Exception):
    pass


@dataclass
class _Tableau:
    """Rows ``A y = b`` with ``b >= 0`` and a basis; cost row kept separately."""

    a: np.ndarray
    b: np.ndarray
    basis: list
    max_pivots: int
    bland_after: int
    pivots: int = 0
    degenerate: int = 0
    bland: bool = False
    _cost_row: np.ndarray = field(default=None, repr=False)

    def pivot(self, r: int, c: int) -> None:
        p = self.a[r, c]
        self.a[r] /= p
        self.b[r] /= p
        col = self.a[:, c].copy()
        col[r] = 0.0
        self.a -= np.outer(col, self.a[r])
        self.b -= col * self.b[r]
        self.basis[r] = c
        self.pivots += 1

    def run(self, cost: np.ndarray, allowed: np.ndarray) -> str:
        """Minimize ``cost . y`` from the current basic feasible solution."""
        while True:
            cb = cost[self.basis]
            reduced = cost - cb @ self.a
            reduced[~allowed] = 0.0
            reduced[self.basis] = 0.0
            candidates = np.flatnonzero(reduced < -OPT_TOL)
            if candidates.size == 0:
                return "optimal"
            if self.pivots >= self.max_pivots:
                raise _IterationLimit
            if self.bland:
                c = int(candidates[0])
            else:
                c = int(candidates[np.argmin(reduced[candidates])])
            col = self.a[:, c]
            rows = np.flatnonzero(col > PIVOT_TOL)
            if rows.size == 0:
                return "unbounded"
            ratios = self.b[rows] / col[rows]
            best = ratios.min()
            ties = rows[ratios <= best + 1e-12]
            # smallest basic index among ties keeps Bland's rule complete
            r = int(min(ties, key=lambda i: self.basis[i]))
            if best <= 1e-12:
                self.degenerate += 1
                if self.degenerate >= self.bland_after:
                    self.bland = True
            self.pivot(r, c)
            np.maximum(self.b, 0.0, out=self.b)


def _standard_form(lp: LinearProgram):
    """Shift to ``y = x - lo >= 0`` and stack rows ``G y (rel) h`` incl. upper bounds."""
    m = lp.n_vars
    lo = lp.var_lo
    rows, rels, rhs = [], [], []
    for con in lp.constraints:
        rows.append(con.coeffs)
        rels.append(con.relation)
        rhs.append(con.rhs - float(con.coeffs @ lo))
    span = lp.var_hi - lo
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        rows.append(e)
        rels.append(Relation.LE)
        rhs.append(float(span[i]))
    return np.array(rows).reshape(len(rows), m), rels, np.array(rhs, dtype=np.float64)


def _phase_one(lp: LinearProgram, max_pivots: int):
    m = lp.n_vars
    g, rels, h = _standard_form(lp)
    n_rows = g.shape[0]
    # flip rows so every right-hand side is non-negative
    for i in range(n_rows):
        if h[i] < 0:
            g[i] = -g[i]
            h[i] = -h[i]
            if rels[i] is Relation.LE:
                rels[i] = Relation.GE
            elif rels[i] is Relation.GE:
                rels[i] = Relation.LE
    n_slack = sum(1 for r in rels if r is not Relation.EQ)
    n_art = sum(1 for r in rels if r is not Relation.LE)
    width = m + n_slack + n_art
    a = np.zeros((n_rows, width))
    a[:, :m] = g
    basis = []
    s_col, art_col = m, m + n_slack
    for i, rel in enumerate(rels):
        if rel is Relation.LE:
            a[i, s_col] = 1.0
            basis.append(s_col)
            s_col += 1
        elif rel is Relation.GE:
            a[i, s_col] = -1.0
            s_col += 1
            a[i, art_col] = 1.0
            basis.append(art_col)
            art_col += 1
        else:
            a[i, art_col] = 1.0
            basis.append(art_col)
            art_col += 1
    tab = _Tableau(a, h.copy(), basis, max_pivots, bland_after=2 * (m + len(lp.constraints)))
    is_art = np.zeros(width, dtype=bool)
    is_art[m + n_slack:] = True
    if n_art:
        cost = is_art.astype(float)
        tab.run(cost, np.ones(width, dtype=bool))
        infeas = float(tab.b[[i for i, c in enumerate(tab.basis) if is_art[c]]].sum()) if any(
            is_art[c] for c in tab.basis) else 0.0
        if infeas > FEAS_TOL:
            return tab, is_art, False
        # drive zero-valued artificials out of the basis; drop redundant rows
        keep = []
        for i in range(len(tab.basis)):
            if is_art[tab.basis[i]]:
                cands = np.flatnonzero((np.abs(tab.a[i]) > PIVOT_TOL) & ~is_art)
                if cands.size:
                    tab.pivot(i, int(cands[0]))
                    np.maximum(tab.b, 0.0, out=tab.b)
                    keep.append(i)
            else:
                keep.append(i)
        if len(keep) < len(tab.basis):
            tab.a = tab.a[keep]
            tab.b = tab.b[keep]
            tab.basis = [tab.basis[i] for i in keep]
    return tab, is_art, True


def _extract(lp: LinearProgram, tab: _Tableau) -> np.ndarray:
    y = np.zeros(tab.a.shape[1])
    y[tab.basis] = tab.b
    x = lp.var_lo + y[: lp.n_vars]
    return np.clip(x, lp.var_lo, lp.var_hi)


def feasible(lp: LinearProgram, max_pivots: int = MAX_PIVOTS) -> tuple[bool, Optional[np.ndarray]]:
    """Phase one only: ``(True, witness)`` or ``(False, None)``.

    Raises ``SolverFailure`` when the pivot cap is reached.
    """
    try:
        tab, _, ok = _phase_one(lp, max_pivots)
    except _IterationLimit:
        raise SolverFailure(f"phase one exceeded {max_pivots} pivots") from None
    if not ok:
        return False, None
    return True, _extract(lp, tab)


def solve(lp: LinearProgram, max_pivots: int = MAX_PIVOTS) -> LpOutcome:
    try:
        tab, is_art, ok = _phase_one(lp, max_pivots)
        if not ok:
            return LpOutcome(LpStatus.INFEASIBLE, pivots=tab.pivots)
        width = tab.a.shape[1]
        cost = np.zeros(width)
        sign = 1.0 if lp.sense == "min" else -1.0
        cost[: lp.n_vars] = sign * lp.objective
        result = tab.run(cost, ~is_art)
    except _IterationLimit:
        return LpOutcome(LpStatus.ITERATION_LIMIT, pivots=max_pivots)
    if result == "unbounded":
        return LpOutcome(LpStatus.UNBOUNDED, pivots=tab.pivots)
    x = _extract(lp, tab)
    return LpOutcome(LpStatus.OPTIMAL, x, float(lp.objective @ x), tab.pivots)


def to_lp_format(lp: LinearProgram, names: Optional[Sequence[str]] = None) -> str:
    """Render in the CPLEX-style text LP format, for cross-checking with external tools."""
    names = list(names) if names is not None else [f"x{i + 1}" for i in range(lp.n_vars)]

    def expr(coeffs) -> str:
        terms = [f"{'-' if c < 0 else '+'} {abs(float(c))!r} {n}" for c, n in zip(coeffs, names) if c != 0]
        if not terms:
            return "0 " + names[0]
        text = " ".join(terms)
        return text[2:] if text.startswith("+ ") else text

    out = ["Minimize" if lp.sense == "min" else "Maximize", f" obj: {expr(lp.objective)}", "Subject To"]
    for k, c in enumerate(lp.constraints):
        out.append(f" c{k + 1}: {expr(c.coeffs)} {c.relation.value} {c.rhs!r}")
    out.append("Bounds")
    for lo, hi, n in zip(lp.var_lo, lp.var_hi, names):
        out.append(f" {float(lo)!r} <= {n} <= {float(hi)!r}")
    out.append("End")
    return "\n".join(out) + "\n"
