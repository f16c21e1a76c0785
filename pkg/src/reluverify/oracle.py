"""Exact output ranges by enumerating ReLU activation patterns.

Fixing every ReLU to one linear piece makes the network affine; the sign
conditions of the fixed pieces are linear constraints on the input. Walking
the patterns depth-first and pruning infeasible prefixes gives the exact
reachable range for small networks. Backed by scipy's HiGHS so that it stays
independent of the in-house simplex it is used to check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from scipy.optimize import linprog

from .interval import ConcreteInterval, InputBox
from .network import Network, Relu

DEFAULT_ORACLE_LIMIT = 16


class OracleLimitError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AffineRegion:
    """One feasible activation pattern: ``F(x) = out_coef @ x + out_const`` on
    ``{x in box : a_ub @ x <= b_ub}``."""

    pattern: tuple[bool, ...]
    out_coef: np.ndarray
    out_const: np.ndarray
    a_ub: np.ndarray
    b_ub: np.ndarray


class _Lp:
    def __init__(self, box: InputBox):
        self.bounds = list(zip(box.lo.tolist(), box.hi.tolist()))
        self.box = box

    def optimize(self, c, a_ub, b_ub) -> Optional[float]:
        """Minimum of ``c @ x`` over the region, or ``None`` if empty."""
        if a_ub.shape[0] == 0:
            return float(np.sum(np.minimum(c * self.box.lo, c * self.box.hi)))
        res = linprog(c, A_ub=a_ub, b_ub=b_ub, bounds=self.bounds, method="highs")
        if res.status == 2:
            return None
        if res.status != 0:
            raise RuntimeError(f"oracle LP failed: {res.message}")
        return float(res.fun)

    def feasible(self, a_ub, b_ub) -> bool:
        return self.optimize(np.zeros(self.box.dim), a_ub, b_ub) is not None


def activation_regions(
    net: Network,
    box: InputBox,
    rows: Optional[tuple[np.ndarray, np.ndarray]] = None,
    limit: int = DEFAULT_ORACLE_LIMIT,
) -> Iterator[AffineRegion]:
    """Yield every feasible activation pattern of ``net`` over ``box``.

    ``rows=(A, b)`` adds extra input constraints ``A x <= b``. Nodes whose sign
    is fixed over the whole box are not branched on.
    """
    if net.relu_count > limit:
        raise OracleLimitError(f"network has {net.relu_count} ReLUs, oracle limit is {limit}")
    d = net.input_dim
    lp = _Lp(box)
    a0 = np.zeros((0, d)) if rows is None else np.asarray(rows[0], dtype=float).reshape(-1, d)
    b0 = np.zeros(0) if rows is None else np.asarray(rows[1], dtype=float).reshape(-1)
    if a0.shape[0] and not lp.feasible(a0, b0):
        return
    layers = net.layers

    def walk(idx, coef, const, a_ub, b_ub, pattern):
        if idx == len(layers):
            yield AffineRegion(tuple(pattern), coef, const, a_ub, b_ub)
            return
        if not isinstance(layers[idx], Relu):
            w, b = net.affine(idx)
            yield from walk(idx + 1, w @ coef, w @ const + b, a_ub, b_ub, pattern)
            return
        yield from split(idx, 0, coef, const, np.ones(len(const), dtype=bool), a_ub, b_ub, pattern)

    def split(idx, j, coef, const, mask, a_ub, b_ub, pattern):
        if j == len(const):
            yield from walk(idx + 1, coef * mask[:, None], const * mask, a_ub, b_ub, pattern)
            return
        row, k = coef[j], const[j]
        terms_lo = np.minimum(row * box.lo, row * box.hi).sum() + k
        terms_hi = np.maximum(row * box.lo, row * box.hi).sum() + k
        # Inactive piece: row.x + k <= 0 ; active piece: -(row.x + k) <= 0.
        choices = []
        if terms_hi <= 0:
            choices.append((False, None))
        elif terms_lo >= 0:
            choices.append((True, None))
        else:
            choices.append((False, (row, -k)))
            choices.append((True, (-row, k)))
        for active, extra in choices:
            a_next, b_next = a_ub, b_ub
            if extra is not None:
                a_next = np.vstack([a_ub, extra[0]])
                b_next = np.append(b_ub, extra[1])
                if not lp.feasible(a_next, b_next):
                    continue
            m = mask.copy()
            m[j] = active
            yield from split(idx, j + 1, coef, const, m, a_next, b_next, pattern + [active])

    yield from walk(0, np.eye(d), np.zeros(d), a0, b0, [])


def exact_output_range(
    net: Network, box: InputBox, limit: int = DEFAULT_ORACLE_LIMIT, rows=None
) -> list[ConcreteInterval]:
    """Exact per-output reachable range (up to LP tolerance)."""
    lp = _Lp(box)
    lo = np.full(net.output_dim, np.inf)
    hi = np.full(net.output_dim, -np.inf)
    seen = False
    for region in activation_regions(net, box, rows, limit):
        for k in range(net.output_dim):
            c = region.out_coef[k]
            vmin = lp.optimize(c, region.a_ub, region.b_ub)
            vmax = lp.optimize(-c, region.a_ub, region.b_ub)
            if vmin is None or vmax is None:
                break
            seen = True
            lo[k] = min(lo[k], vmin + region.out_const[k])
            hi[k] = max(hi[k], -vmax + region.out_const[k])
    if not seen:
        raise ValueError("input region is empty")
    return [ConcreteInterval(float(a), float(b)) for a, b in zip(lo, hi)]


def exact_minimum(
    net: Network, box: InputBox, objective, limit: int = DEFAULT_ORACLE_LIMIT, rows=None
) -> tuple[float, np.ndarray]:
    """Exact ``min objective @ F(x)`` over the box, with a minimizer."""
    objective = np.asarray(objective, dtype=float)
    best, arg = np.inf, None
    for region in activation_regions(net, box, rows, limit):
        c = objective @ region.out_coef
        k = float(objective @ region.out_const)
        if region.a_ub.shape[0] == 0:
            x = np.where(c >= 0, box.lo, box.hi)
            val = float(c @ x) + k
        else:
            res = linprog(c, A_ub=region.a_ub, b_ub=region.b_ub,
                          bounds=list(zip(box.lo, box.hi)), method="highs")
            if res.status != 0:
                continue
            x, val = res.x, float(res.fun) + k
        if val < best:
            best, arg = val, np.asarray(x, dtype=float)
    if arg is None:
        raise ValueError("input region is empty")
    return best, arg
