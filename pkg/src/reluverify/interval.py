"""Affine expressions over the network inputs and sound interval evaluation.

Everything here is immutable. Scalar-level types (``LinearExpression``,
``BoundPair``) are the public vocabulary; ``SymbolicBounds`` stores a whole
layer as arrays and is what the propagators actually push around.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when vectors, matrices or boxes disagree on shape."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


# Twice the unit roundoff: error bounds built from it cover both our own
# arithmetic and a plain floating-point evaluation of the same network.
UNIT = float(np.finfo(np.float64).eps)


def rounding_gamma(n):
    """Relative error bound after ``n`` rounded operations (``n`` may be an array)."""
    nu = np.asarray(n, dtype=np.float64) * UNIT
    return nu / (1.0 - nu)


def rounded_ops(weights, bias) -> np.ndarray:
    """Per row, how many rounded operations ``weights @ v + bias`` can take.

    Products by a power of two are exact, as are additions of zeros.
    """
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    b = np.broadcast_to(np.asarray(bias, dtype=np.float64), (w.shape[0],))
    nz = w != 0.0
    mant, _ = np.frexp(w)
    inexact = nz & (np.abs(mant) != 0.5)
    adds = np.maximum(nz.sum(axis=1) + (b != 0.0) - 1, 0)
    # sign-split products are summed separately, then added
    mixed = np.any(w > 0, axis=1) & np.any(w < 0, axis=1)
    return adds + inexact.sum(axis=1) + mixed


def round_down(x):
    """Next representable value toward -inf; exact zeros are left alone."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x == 0.0, 0.0, np.nextafter(x, -np.inf))


def round_up(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x == 0.0, 0.0, np.nextafter(x, np.inf))


@dataclass(frozen=True)
class ConcreteInterval:
    lo: float
    hi: float

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)):
            raise ValueError(f"interval endpoints must be finite, got [{self.lo}, {self.hi}]")
        if self.lo > self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, value: float, tol: float = 0.0) -> bool:
        return self.lo - tol <= value <= self.hi + tol

    def hull(self, other: "ConcreteInterval") -> "ConcreteInterval":
        return ConcreteInterval(min(self.lo, other.lo), max(self.hi, other.hi))

    def __iter__(self):
        yield self.lo
        yield self.hi


def outward_round(iv: ConcreteInterval) -> ConcreteInterval:
    """Widen each endpoint by one ulp in the safe direction."""
    return ConcreteInterval(float(round_down(iv.lo)), float(round_up(iv.hi)))


@dataclass(frozen=True)
class InputBox:
    lo: np.ndarray
    hi: np.ndarray

    def __init__(self, lo: Sequence[float], hi: Sequence[float]):
        lo_a, hi_a = _frozen(lo), _frozen(hi)
        if lo_a.ndim != 1 or lo_a.shape != hi_a.shape:
            raise DimensionError(f"box bounds have shapes {lo_a.shape} and {hi_a.shape}")
        if np.any(lo_a > hi_a):
            bad = int(np.argmax(lo_a > hi_a))
            raise ValueError(f"box axis {bad} has lo {lo_a[bad]} > hi {hi_a[bad]}")
        object.__setattr__(self, "lo", lo_a)
        object.__setattr__(self, "hi", hi_a)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))

    def __eq__(self, other):
        if not isinstance(other, InputBox):
            return NotImplemented
        return np.array_equal(self.lo, other.lo) and np.array_equal(self.hi, other.hi)

    def __hash__(self):
        return hash((self.lo.tobytes(), self.hi.tobytes()))

    def __repr__(self):
        return f"InputBox(lo={self.lo.tolist()}, hi={self.hi.tolist()})"


@dataclass(frozen=True)
class LinearExpression:
    """``constant + coeffs . x`` over the ``d`` network inputs."""

    coeffs: np.ndarray
    constant: float = 0.0

    def __init__(self, coeffs: Sequence[float], constant: float = 0.0):
        c = _frozen(coeffs)
        if c.ndim != 1:
            raise DimensionError("coefficients must be a vector")
        if not (np.all(np.isfinite(c)) and np.isfinite(constant)):
            raise ValueError("linear expression has non-finite entries")
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "constant", float(constant))

    @classmethod
    def zero(cls, dim: int) -> "LinearExpression":
        return cls(np.zeros(dim), 0.0)

    @classmethod
    def variable(cls, dim: int, index: int) -> "LinearExpression":
        c = np.zeros(dim)
        c[index] = 1.0
        return cls(c, 0.0)

    @property
    def dim(self) -> int:
        return self.coeffs.shape[0]

    def __add__(self, other: "LinearExpression") -> "LinearExpression":
        return LinearExpression(self.coeffs + other.coeffs, self.constant + other.constant)

    def __sub__(self, other: "LinearExpression") -> "LinearExpression":
        return LinearExpression(self.coeffs - other.coeffs, self.constant - other.constant)

    def __neg__(self) -> "LinearExpression":
        return LinearExpression(-self.coeffs, -self.constant)

    def scale(self, k: float) -> "LinearExpression":
        return LinearExpression(k * self.coeffs, k * self.constant)

    def shift(self, k: float) -> "LinearExpression":
        return LinearExpression(self.coeffs, self.constant + k)

    def __eq__(self, other):
        if not isinstance(other, LinearExpression):
            return NotImplemented
        return np.array_equal(self.coeffs, other.coeffs) and self.constant == other.constant

    def __hash__(self):
        return hash((self.coeffs.tobytes(), self.constant))

    def __repr__(self):
        return f"LinearExpression({self.coeffs.tolist()}, {self.constant!r})"


def evaluate(expr: LinearExpression, point) -> float:
    p = np.asarray(point, dtype=np.float64)
    if p.shape != expr.coeffs.shape:
        raise DimensionError(f"point has shape {p.shape}, expression expects {expr.coeffs.shape}")
    return float(expr.constant + expr.coeffs @ p)


def _magnitude(coeffs: np.ndarray, consts, box: InputBox) -> np.ndarray:
    """Row-wise bound on ``|coeffs @ x| + |consts|`` over ``box``."""
    return np.abs(coeffs) @ np.maximum(np.abs(box.lo), np.abs(box.hi)) + np.abs(consts)


def _envelope(coeffs: np.ndarray, consts: np.ndarray, box: InputBox, slack=0.0):
    """Row-wise concrete range of ``coeffs @ x + consts`` over ``box``, outward rounded.

    ``slack`` is a known absolute error already carried by the expressions.
    """
    if coeffs.shape[-1] != box.dim:
        raise DimensionError(f"expressions over {coeffs.shape[-1]} inputs, box has {box.dim}")
    a = coeffs * box.lo
    b = coeffs * box.hi
    ops = rounded_ops(coeffs, consts).reshape(np.shape(consts))
    err = slack + rounding_gamma(ops) * _magnitude(coeffs, consts, box)
    lo = consts + np.minimum(a, b).sum(axis=-1) - err
    hi = consts + np.maximum(a, b).sum(axis=-1) + err
    inexact = (ops > 0) | (err > 0)
    return np.where(inexact, round_down(lo), lo), np.where(inexact, round_up(hi), hi)


def concrete_bounds(expr: LinearExpression, box: InputBox) -> ConcreteInterval:
    lo, hi = _envelope(expr.coeffs, np.float64(expr.constant), box)
    return ConcreteInterval(float(lo), float(hi))


@dataclass(frozen=True)
class BoundPair:
    eq_low: LinearExpression
    eq_up: LinearExpression
    conc_low: ConcreteInterval
    conc_up: ConcreteInterval

    @classmethod
    def from_expressions(cls, eq_low, eq_up, box: InputBox) -> "BoundPair":
        return cls(eq_low, eq_up, concrete_bounds(eq_low, box), concrete_bounds(eq_up, box))

    @classmethod
    def exact(cls, eq: LinearExpression, box: InputBox) -> "BoundPair":
        return cls.from_expressions(eq, eq, box)

    @property
    def lower(self) -> float:
        """Concrete lower bound of the node value (min of ``eq_low``)."""
        return self.conc_low.lo

    @property
    def upper(self) -> float:
        return self.conc_up.hi

    @property
    def interval(self) -> ConcreteInterval:
        return ConcreteInterval(self.lower, self.upper)


@dataclass(frozen=True, eq=False)
class SymbolicBounds:
    """Lower/upper affine bounds for ``n`` nodes of one layer, stored as arrays.

    ``low_coef``/``up_coef`` are ``(n, d)``; constants are ``(n,)``. The
    envelopes of each expression over ``box`` are cached as ``l_low``,
    ``u_low`` (range of the lower expression) and ``l_up``, ``u_up`` (range of
    the upper expression).

    ``lower``/``upper`` are the concrete node bounds: the envelope, further
    intersected with ``floor``/``ceil`` when an independent sound interval for
    the node is known (interval arithmetic carried alongside the expressions).

    ``slack`` bounds the accumulated rounding error: the true lower bound of
    node ``j`` is at least ``low_expr(j) - slack[j]`` and the true upper bound
    at most ``up_expr(j) + slack[j]``. Anything that reads the expressions
    directly (LP rows, for instance) has to widen them by it.
    """

    low_coef: np.ndarray
    low_const: np.ndarray
    up_coef: np.ndarray
    up_const: np.ndarray
    box: InputBox
    floor: Optional[np.ndarray] = None
    ceil: Optional[np.ndarray] = None
    slack: Optional[np.ndarray] = None
    l_low: np.ndarray = field(init=False)
    u_low: np.ndarray = field(init=False)
    l_up: np.ndarray = field(init=False)
    u_up: np.ndarray = field(init=False)
    lower: np.ndarray = field(init=False)
    upper: np.ndarray = field(init=False)

    def __post_init__(self):
        for name in ("low_coef", "low_const", "up_coef", "up_const"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        n, d = self.low_coef.shape
        if self.up_coef.shape != (n, d) or self.low_const.shape != (n,) or self.up_const.shape != (n,):
            raise DimensionError("inconsistent symbolic bound shapes")
        slack = np.zeros(n) if self.slack is None else np.asarray(self.slack, dtype=np.float64)
        if slack.shape != (n,) or np.any(slack < 0):
            raise ValueError("slack must be a non-negative value per node")
        object.__setattr__(self, "slack", _frozen(slack))
        l_low, u_low = _envelope(self.low_coef, self.low_const, self.box, slack)
        l_up, u_up = _envelope(self.up_coef, self.up_const, self.box, slack)
        if not (np.all(np.isfinite(l_low)) and np.all(np.isfinite(u_up))):
            raise FloatingPointError("symbolic bounds overflowed")
        lower, upper = l_low, u_up
        if self.floor is not None:
            lower = np.maximum(lower, self.floor)
        if self.ceil is not None:
            upper = np.minimum(upper, self.ceil)
        # both sides are sound, so a crossing can only be rounding noise
        lower = np.minimum(lower, upper)
        for name, val in (("l_low", l_low), ("u_low", u_low), ("l_up", l_up), ("u_up", u_up),
                          ("lower", lower), ("upper", upper)):
            object.__setattr__(self, name, _frozen(val))
        if self.floor is not None:
            object.__setattr__(self, "floor", _frozen(self.floor))
        if self.ceil is not None:
            object.__setattr__(self, "ceil", _frozen(self.ceil))

    @classmethod
    def identity(cls, box: InputBox) -> "SymbolicBounds":
        d = box.dim
        eye = np.eye(d)
        return cls(eye, np.zeros(d), eye, np.zeros(d), box)

    @classmethod
    def from_pairs(cls, pairs: Sequence[BoundPair], box: InputBox) -> "SymbolicBounds":
        return cls(
            np.array([p.eq_low.coeffs for p in pairs]).reshape(len(pairs), box.dim),
            np.array([p.eq_low.constant for p in pairs]),
            np.array([p.eq_up.coeffs for p in pairs]).reshape(len(pairs), box.dim),
            np.array([p.eq_up.constant for p in pairs]),
            box,
        )

    def __len__(self) -> int:
        return self.low_coef.shape[0]

    @property
    def magnitude(self) -> np.ndarray:
        """Per node, a bound on the absolute value of both expressions over the box."""
        return np.maximum(_magnitude(self.low_coef, self.low_const, self.box),
                          _magnitude(self.up_coef, self.up_const, self.box))

    @property
    def is_exact(self) -> bool:
        return np.array_equal(self.low_coef, self.up_coef) and np.array_equal(self.low_const, self.up_const)

    def low_expr(self, j: int) -> LinearExpression:
        return LinearExpression(self.low_coef[j], self.low_const[j])

    def up_expr(self, j: int) -> LinearExpression:
        return LinearExpression(self.up_coef[j], self.up_const[j])

    def pair(self, j: int) -> BoundPair:
        return BoundPair(
            self.low_expr(j),
            self.up_expr(j),
            ConcreteInterval(float(self.l_low[j]), float(self.u_low[j])),
            ConcreteInterval(float(self.l_up[j]), float(self.u_up[j])),
        )

    def pairs(self) -> list[BoundPair]:
        return [self.pair(j) for j in range(len(self))]

    def node_interval(self, j: int) -> ConcreteInterval:
        return ConcreteInterval(float(self.lower[j]), float(self.upper[j]))

    def intervals(self) -> list[ConcreteInterval]:
        return [ConcreteInterval(float(lo), float(hi)) for lo, hi in zip(self.lower, self.upper)]

    def evaluate(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Pointwise values of the lower and upper expressions at ``x``."""
        x = np.asarray(x, dtype=np.float64)
        return self.low_coef @ x + self.low_const, self.up_coef @ x + self.up_const


def affine_bounds(bounds: SymbolicBounds, weights, bias) -> SymbolicBounds:
    """Push symbolic bounds through ``W z + b`` with concrete weights.

    Positive weights pair lower with lower; negative weights swap roles. The
    node intervals are pushed through with interval arithmetic and kept as the
    result's floor/ceil.
    """
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != len(bounds) or b.shape != (w.shape[0],):
        raise DimensionError(
            f"weights {w.shape} and bias {b.shape} do not fit {len(bounds)} input nodes"
        )
    wp = np.maximum(w, 0.0)
    wn = np.minimum(w, 0.0)
    floor, ceil = interval_affine(bounds.lower, bounds.upper, w, b)
    aw = np.abs(w)
    slack = aw @ bounds.slack + rounding_gamma(rounded_ops(w, b)) * (aw @ bounds.magnitude + np.abs(b))
    return SymbolicBounds(
        wp @ bounds.low_coef + wn @ bounds.up_coef,
        wp @ bounds.low_const + wn @ bounds.up_const + b,
        wp @ bounds.up_coef + wn @ bounds.low_coef,
        wp @ bounds.up_const + wn @ bounds.low_const + b,
        bounds.box,
        floor,
        ceil,
        slack,
    )


def linear_map(bounds: Sequence[BoundPair], weights, bias, box: InputBox) -> list[BoundPair]:
    return affine_bounds(SymbolicBounds.from_pairs(bounds, box), weights, bias).pairs()


def interval_affine(lo, hi, weights, bias) -> tuple[np.ndarray, np.ndarray]:
    """Plain interval arithmetic for ``W z + b``; no dependency tracking."""
    w = np.asarray(weights, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != lo.shape[0]:
        raise DimensionError(f"weights {w.shape} do not fit {lo.shape[0]} inputs")
    wp = np.maximum(w, 0.0)
    wn = np.minimum(w, 0.0)
    # elementwise products and a fixed summation tree instead of BLAS, whose
    # result can depend on memory alignment; this keeps the map monotone
    ops = rounded_ops(w, bias)
    err = rounding_gamma(ops) * (_rowsum(np.abs(w), np.maximum(np.abs(lo), np.abs(hi))) + np.abs(bias))
    new_lo = _rowsum(wp, lo) + _rowsum(wn, hi) + bias - err
    new_hi = _rowsum(wp, hi) + _rowsum(wn, lo) + bias + err
    inexact = ops > 0
    return np.where(inexact, round_down(new_lo), new_lo), np.where(inexact, round_up(new_hi), new_hi)


def _rowsum(w: np.ndarray, v: np.ndarray) -> np.ndarray:
    return (w * v).sum(axis=1)
