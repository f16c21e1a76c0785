"""Brute-force LP reference: enumerate every vertex of the feasible polytope."""

from itertools import combinations

import numpy as np

from reluverify.lp import Constraint, LinearProgram, Relation


def random_lp(rng, max_vars=6, max_cons=10) -> LinearProgram:
    m = int(rng.integers(1, max_vars + 1))
    cons = []
    for _ in range(int(rng.integers(0, max_cons + 1))):
        rel = (Relation.LE, Relation.GE, Relation.LE, Relation.GE, Relation.EQ)[int(rng.integers(5))]
        cons.append(Constraint(rng.uniform(-1, 1, m).round(3), rel, round(float(rng.uniform(-1, 1)), 3)))
    lo = rng.uniform(-1, 0, m).round(3)
    hi = lo + rng.uniform(0.1, 2, m).round(3)
    sense = "min" if rng.random() < 0.5 else "max"
    return LinearProgram(rng.uniform(-1, 1, m).round(3), cons, lo, hi, sense)


def vertex_optimum(lp: LinearProgram, tol: float = 1e-9):
    """``(feasible, best value)`` by solving every square subsystem of active constraints."""
    m = lp.n_vars
    planes = [(c.coeffs, c.rhs) for c in lp.constraints]
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        planes += [(e, lp.var_lo[i]), (e, lp.var_hi[i])]
    a_all = np.array([p[0] for p in planes])
    b_all = np.array([p[1] for p in planes])
    subsets = np.array(list(combinations(range(len(planes)), m)))
    mats = a_all[subsets]
    rhs = b_all[subsets]
    ok = np.abs(np.linalg.det(mats)) > 1e-10
    pts = np.linalg.solve(mats[ok], rhs[ok][..., None])[..., 0]
    feasible = [x for x in pts if lp.satisfied_by(x, tol)]
    if not feasible:
        return False, None
    vals = np.array(feasible) @ lp.objective
    return True, float(vals.min() if lp.sense == "min" else vals.max())
