"""Input regions, output properties, and their encoding as LP rows.

LP variables are the ``d`` network inputs followed by any auxiliary variables a
region needs (``t_i`` for the L1 ball, the scalar ``s`` for brightness and
contrast).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .interval import DimensionError, InputBox, round_down, round_up, rounding_gamma
from .lp import Constraint, LinearProgram, Relation
from .network import Normalization
from .propagation import PropagationTrace

REGION_TOL = 1e-7


class PropertyError(ValueError):
    """A property document is malformed; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


def _vec(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RegionEncoding:
    """A propagation box plus LP rows over ``d + n_aux`` variables."""

    box: InputBox
    rows: tuple
    aux_lo: np.ndarray
    aux_hi: np.ndarray

    @property
    def n_aux(self) -> int:
        return self.aux_lo.shape[0]

    @property
    def n_vars(self) -> int:
        return self.box.dim + self.n_aux

    @property
    def var_lo(self) -> np.ndarray:
        return np.concatenate([self.box.lo, self.aux_lo])

    @property
    def var_hi(self) -> np.ndarray:
        return np.concatenate([self.box.hi, self.aux_hi])


# --------------------------------------------------------------------- regions


class InputRegion:
    """Base class; subclasses are immutable dataclasses."""

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def encode(self) -> RegionEncoding:
        raise NotImplementedError

    def box(self) -> InputBox:
        return self.encode().box

    def contains(self, x, tol: float = REGION_TOL) -> bool:
        raise NotImplementedError

    def project(self, x) -> np.ndarray:
        """A nearby point of the region; used to repair solver round-off."""
        raise NotImplementedError

    def normalized(self, norm: Normalization) -> "InputRegion":
        raise NotImplementedError


@dataclass(frozen=True)
class BoxRegion(InputRegion):
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo, hi = _vec(self.lo, "lo"), _vec(self.hi, "hi")
        if lo.shape != hi.shape:
            raise DimensionError("box lo and hi differ in length")
        if np.any(lo > hi):
            raise ValueError("box lo exceeds hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def encode(self) -> RegionEncoding:
        return RegionEncoding(InputBox(self.lo, self.hi), (), np.zeros(0), np.zeros(0))

    def contains(self, x, tol: float = REGION_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return x.shape == self.lo.shape and bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def project(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lo, self.hi)

    def normalized(self, norm: Normalization) -> "BoxRegion":
        # the network clips raw inputs to [mins, maxes] first, so only that part matters
        lo = np.clip(self.lo, norm.mins, norm.maxes)
        hi = np.clip(self.hi, norm.mins, norm.maxes)
        return BoxRegion(norm.normalize(lo), norm.normalize(hi))


@dataclass(frozen=True)
class LInfRegion(InputRegion):
    center: np.ndarray
    eps: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center, "center"))
        if not self.eps >= 0:
            raise ValueError("eps must be non-negative")
        object.__setattr__(self, "eps", float(self.eps))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def as_box(self) -> BoxRegion:
        return BoxRegion(round_down(self.center - self.eps), round_up(self.center + self.eps))

    def encode(self) -> RegionEncoding:
        return self.as_box().encode()

    def contains(self, x, tol: float = REGION_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return x.shape == self.center.shape and float(np.max(np.abs(x - self.center), initial=0.0)) <= self.eps + tol

    def project(self, x) -> np.ndarray:
        x = np.clip(np.asarray(x, dtype=float), self.center - self.eps, self.center + self.eps)
        # c +- eps itself may sit an ulp outside the ball
        while np.any(out := np.abs(x - self.center) > self.eps):
            x = np.where(out, np.nextafter(x, self.center), x)
        return x

    def normalized(self, norm: Normalization) -> BoxRegion:
        return self.as_box().normalized(norm)


@dataclass(frozen=True)
class L1Region(InputRegion):
    """``sum_i w_i |x_i - c_i| <= eps``; weights default to one."""

    center: np.ndarray
    eps: float
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        c = _vec(self.center, "center")
        object.__setattr__(self, "center", c)
        if not self.eps >= 0:
            raise ValueError("eps must be non-negative")
        object.__setattr__(self, "eps", float(self.eps))
        w = np.ones_like(c) if self.weights is None else _vec(self.weights, "weights")
        if w.shape != c.shape or np.any(w <= 0):
            raise ValueError("weights must be positive, one per input")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def encode(self) -> RegionEncoding:
        d = self.dim
        radius = self.eps / self.weights
        box = InputBox(round_down(self.center - radius), round_up(self.center + radius))
        rows = []
        for i in range(d):
            # t_i >= x_i - c_i  and  t_i >= c_i - x_i
            a = np.zeros(2 * d)
            a[i], a[d + i] = 1.0, -1.0
            rows.append(Constraint(a, Relation.LE, self.center[i]))
            b = np.zeros(2 * d)
            b[i], b[d + i] = -1.0, -1.0
            rows.append(Constraint(b, Relation.LE, -self.center[i]))
        total = np.concatenate([np.zeros(d), self.weights])
        rows.append(Constraint(total, Relation.LE, self.eps))
        return RegionEncoding(box, tuple(rows), np.zeros(d), radius.copy())

    def contains(self, x, tol: float = REGION_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        return x.shape == self.center.shape and float(self.weights @ np.abs(x - self.center)) <= self.eps + tol

    def project(self, x) -> np.ndarray:
        delta = np.asarray(x, dtype=float) - self.center
        size = float(self.weights @ np.abs(delta))
        if size > self.eps:
            delta = delta * (self.eps / size)
            # rescaling can land an ulp outside; shrink until it is inside
            while float(self.weights @ np.abs(delta)) > self.eps:
                delta = np.nextafter(delta, 0.0)
        return self.center + delta

    def normalized(self, norm: Normalization) -> "L1Region":
        d = self.dim
        ranges = norm.ranges[:d]
        return L1Region(norm.normalize(self.center), self.eps, self.weights * ranges)


@dataclass(frozen=True)
class SegmentRegion(InputRegion):
    """Points ``base + s * direction`` for a scalar ``s`` in ``[s_lo, s_hi]``.

    Brightness and contrast are both of this shape; the engine bisects ``s``.
    """

    base: np.ndarray
    direction: np.ndarray
    s_lo: float
    s_hi: float

    def __post_init__(self):
        base, direction = _vec(self.base, "base"), _vec(self.direction, "direction")
        if base.shape != direction.shape:
            raise DimensionError("base and direction differ in length")
        if not self.s_lo <= self.s_hi:
            raise ValueError("scalar range is empty")
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "s_lo", float(self.s_lo))
        object.__setattr__(self, "s_hi", float(self.s_hi))

    @property
    def dim(self) -> int:
        return self.base.shape[0]

    def segment(self, s_lo: float, s_hi: float) -> "SegmentRegion":
        return SegmentRegion(self.base, self.direction, s_lo, s_hi)

    def bisect(self) -> tuple["SegmentRegion", "SegmentRegion"]:
        mid = self.s_lo + (self.s_hi - self.s_lo) / 2.0
        return self.segment(self.s_lo, mid), self.segment(mid, self.s_hi)

    def point(self, s: float) -> np.ndarray:
        return self.base + s * self.direction

    def encode(self) -> RegionEncoding:
        d = self.dim
        a, b = self.point(self.s_lo), self.point(self.s_hi)
        box = InputBox(round_down(np.minimum(a, b)), round_up(np.maximum(a, b)))
        rows = []
        for i in range(d):
            # x_i - direction_i * s = base_i
            r = np.zeros(d + 1)
            r[i], r[d] = 1.0, -self.direction[i]
            rows.append(Constraint(r, Relation.EQ, self.base[i]))
        return RegionEncoding(box, tuple(rows), np.array([self.s_lo]), np.array([self.s_hi]))

    def _closest_s(self, x) -> float:
        x = np.asarray(x, dtype=float)
        nn = float(self.direction @ self.direction)
        s = self.s_lo if nn == 0.0 else float(self.direction @ (x - self.base)) / nn
        return float(np.clip(s, self.s_lo, self.s_hi))

    def contains(self, x, tol: float = REGION_TOL) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != self.base.shape:
            return False
        # a point on a slanted segment is rarely representable exactly
        tol = max(tol, 8 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(x), initial=0.0))))
        return float(np.max(np.abs(x - self.point(self._closest_s(x))), initial=0.0)) <= tol

    def project(self, x) -> np.ndarray:
        return self.point(self._closest_s(x))

    def normalized(self, norm: Normalization) -> "SegmentRegion":
        d = self.dim
        means, ranges = norm.means[:d], norm.ranges[:d]
        return SegmentRegion((self.base - means) / ranges, self.direction / ranges, self.s_lo, self.s_hi)


def brightness_region(center, eps: float) -> SegmentRegion:
    """Every input shifted by the same ``delta`` in ``[-eps, eps]``."""
    if not eps >= 0:
        raise ValueError("eps must be non-negative")
    c = _vec(center, "center")
    return SegmentRegion(c, np.ones_like(c), -float(eps), float(eps))


def contrast_region(center, lo_scale: float, hi_scale: float) -> SegmentRegion:
    """Every input scaled by the same factor in ``[lo_scale, hi_scale]``."""
    if not lo_scale > 0:
        raise ValueError("contrast scales must be positive")
    if not lo_scale <= hi_scale:
        raise ValueError("lo_scale exceeds hi_scale")
    c = _vec(center, "center")
    return SegmentRegion(np.zeros_like(c), c, float(lo_scale), float(hi_scale))


# ------------------------------------------------------------------ properties


@dataclass(frozen=True)
class Disjunct:
    """One way to violate a property: ``coeffs . F > rhs`` (or ``>=`` when not strict)."""

    coeffs: np.ndarray
    rhs: float
    strict: bool

    def violated_by(self, outputs) -> bool:
        v = float(self.coeffs @ np.asarray(outputs, dtype=float))
        return v > self.rhs if self.strict else v >= self.rhs


class OutputProperty:
    def disjuncts(self, n_outputs: int) -> list[Disjunct]:
        raise NotImplementedError

    def violated_by(self, outputs) -> bool:
        outputs = np.asarray(outputs, dtype=float).reshape(-1)
        return any(dj.violated_by(outputs) for dj in self.disjuncts(outputs.shape[0]))


@dataclass(frozen=True)
class Classification(OutputProperty):
    """Safe iff ``true_label`` is the strict argmax; ties count as violations."""

    true_label: int

    def disjuncts(self, n_outputs: int) -> list[Disjunct]:
        t = self.true_label
        if not 0 <= t < n_outputs:
            raise DimensionError(f"label {t} out of range for {n_outputs} outputs")
        out = []
        for o in range(n_outputs):
            if o != t:
                c = np.zeros(n_outputs)
                c[o], c[t] = 1.0, -1.0
                out.append(Disjunct(c, 0.0, strict=False))
        return out


_NEGATION = {
    "<=": [(1.0, True)],
    "<": [(1.0, False)],
    ">=": [(-1.0, True)],
    ">": [(-1.0, False)],
    "=": [(1.0, True), (-1.0, True)],
}


@dataclass(frozen=True)
class OutputRow:
    coeffs: np.ndarray
    relation: str
    rhs: float

    def __post_init__(self):
        object.__setattr__(self, "coeffs", _vec(self.coeffs, "coeffs"))
        if self.relation not in _NEGATION:
            raise ValueError(f"unknown relation {self.relation!r}")
        object.__setattr__(self, "rhs", float(self.rhs))


@dataclass(frozen=True)
class LinearSafe(OutputProperty):
    """Safe iff every row ``coeffs . F (relation) rhs`` holds."""

    rows: tuple

    def __post_init__(self):
        rows = tuple(r if isinstance(r, OutputRow) else OutputRow(*r) for r in self.rows)
        if not rows:
            raise ValueError("a linear property needs at least one row")
        object.__setattr__(self, "rows", rows)

    def disjuncts(self, n_outputs: int) -> list[Disjunct]:
        out = []
        for r in self.rows:
            if r.coeffs.shape != (n_outputs,):
                raise DimensionError(f"row has {r.coeffs.shape[0]} coefficients, network has {n_outputs} outputs")
            for sign, strict in _NEGATION[r.relation]:
                out.append(Disjunct(sign * r.coeffs, sign * r.rhs, strict))
        return out


@dataclass(frozen=True)
class RegressionBand(OutputProperty):
    """Safe iff ``|F[output] - center_output| <= max_dev``."""

    center_output: float
    max_dev: float
    output: int = 0

    def __post_init__(self):
        if not self.max_dev >= 0:
            raise ValueError("max_dev must be non-negative")

    def disjuncts(self, n_outputs: int) -> list[Disjunct]:
        if not 0 <= self.output < n_outputs:
            raise DimensionError(f"output {self.output} out of range for {n_outputs} outputs")
        e = np.zeros(n_outputs)
        e[self.output] = 1.0
        return [
            Disjunct(e, self.center_output + self.max_dev, strict=True),
            Disjunct(-e, -(self.center_output - self.max_dev), strict=True),
        ]


# -------------------------------------------------------------------- encoding


def region_to_box(region: InputRegion) -> tuple[InputBox, tuple, int]:
    enc = region.encode()
    return enc.box, enc.rows, enc.n_aux


def pad(coeffs, n_vars: int) -> np.ndarray:
    out = np.zeros(n_vars)
    c = np.asarray(coeffs, dtype=float)
    out[: c.shape[0]] = c
    return out


def combine_outputs(trace: PropagationTrace, coeffs) -> tuple[np.ndarray, float, np.ndarray, float]:
    """Symbolic lower and upper bounds of ``coeffs . F`` from a trace.

    Returns ``(low_coef, low_const, up_coef, up_const)`` over the inputs. The
    constants already absorb the rounding slack of the trace.
    """
    c = np.asarray(coeffs, dtype=float)
    out = trace.output
    cp, cn = np.maximum(c, 0.0), np.minimum(c, 0.0)
    ac = np.abs(c)
    slack = float(ac @ out.slack + rounding_gamma(2 * len(c) + out.box.dim + 1) * (ac @ out.magnitude))
    low_coef = cp @ out.low_coef + cn @ out.up_coef
    low_const = float(cp @ out.low_const + cn @ out.up_const) - slack
    up_coef = cp @ out.up_coef + cn @ out.low_coef
    up_const = float(cp @ out.up_const + cn @ out.low_const) + slack
    return low_coef, low_const, up_coef, up_const


def concrete_upper(trace: PropagationTrace, coeffs) -> float:
    """Interval upper bound of ``coeffs . F`` from the trace's output intervals."""
    c = np.asarray(coeffs, dtype=float)
    out = trace.output
    value = np.maximum(c, 0.0) @ out.upper + np.minimum(c, 0.0) @ out.lower
    mag = np.abs(c) @ np.maximum(np.abs(out.lower), np.abs(out.upper))
    return float(round_up(value + rounding_gamma(2 * len(c)) * mag))


@dataclass(frozen=True)
class ViolationSystem:
    """Feasible iff the relaxation admits a violation of ``disjunct``.

    The objective maximizes the relaxed lower bound of the violated quantity,
    steering the witness toward a concrete violation.
    """

    disjunct: Disjunct
    lp: LinearProgram


def build_violation_systems(
    prop: OutputProperty,
    trace: PropagationTrace,
    encoding: RegionEncoding,
    split_rows: Sequence[Constraint] = (),
) -> list[ViolationSystem]:
    n_out = len(trace.output)
    d = trace.box.dim
    m = encoding.n_vars
    if encoding.box.dim != d:
        raise DimensionError("region and trace disagree on the input dimension")
    base = list(encoding.rows) + [Constraint(pad(r.coeffs, m), r.relation, r.rhs) for r in split_rows]
    systems = []
    for dj in prop.disjuncts(n_out):
        low_coef, low_const, up_coef, up_const = combine_outputs(trace, dj.coeffs)
        # up . x + up_const >= rhs, the closed form of the violation
        row = Constraint(pad(up_coef, m), Relation.GE, dj.rhs - up_const)
        lp = LinearProgram(pad(low_coef, m), base + [row], encoding.var_lo, encoding.var_hi, "max")
        systems.append(ViolationSystem(dj, lp))
    return systems


# --------------------------------------------------------------------- parsing

_REGION_KINDS = ("linf", "l1", "brightness", "contrast", "box")
_PROPERTY_KINDS = ("classification", "linear_safe", "regression_band")


def _one_of(doc, path: str, kinds) -> tuple[str, dict]:
    if not isinstance(doc, dict):
        raise PropertyError(path, "expected an object")
    if len(doc) != 1:
        raise PropertyError(path, f"expected exactly one of {', '.join(kinds)}")
    (kind, body), = doc.items()
    if kind not in kinds:
        raise PropertyError(f"{path}.{kind}", f"unknown kind {kind!r}; expected one of {', '.join(kinds)}")
    if not isinstance(body, dict):
        raise PropertyError(f"{path}.{kind}", "expected an object")
    return kind, body


def _field(body: dict, path: str, name: str, kind: str, default=...):
    if name not in body:
        if default is not ...:
            return default
        raise PropertyError(f"{path}.{name}", "missing required field")
    v = body[name]
    p = f"{path}.{name}"
    if kind == "number":
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
            raise PropertyError(p, "expected a finite number")
        return float(v)
    if kind == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            raise PropertyError(p, "expected an integer")
        return v
    if kind == "vector":
        if not isinstance(v, list) or not v:
            raise PropertyError(p, "expected a non-empty array of numbers")
        for i, x in enumerate(v):
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not np.isfinite(x):
                raise PropertyError(f"{p}[{i}]", "expected a finite number")
        return np.array(v, dtype=float)
    raise AssertionError(kind)


def _check_keys(body: dict, path: str, allowed) -> None:
    for k in body:
        if k not in allowed:
            raise PropertyError(f"{path}.{k}", "unexpected field")


def _parse_region(doc, path: str) -> InputRegion:
    kind, body = _one_of(doc, path, _REGION_KINDS)
    p = f"{path}.{kind}"
    try:
        if kind == "linf":
            _check_keys(body, p, ("center", "eps"))
            return LInfRegion(_field(body, p, "center", "vector"), _field(body, p, "eps", "number"))
        if kind == "l1":
            _check_keys(body, p, ("center", "eps"))
            return L1Region(_field(body, p, "center", "vector"), _field(body, p, "eps", "number"))
        if kind == "brightness":
            _check_keys(body, p, ("center", "eps"))
            return brightness_region(_field(body, p, "center", "vector"), _field(body, p, "eps", "number"))
        if kind == "contrast":
            _check_keys(body, p, ("center", "lo_scale", "hi_scale"))
            return contrast_region(_field(body, p, "center", "vector"), _field(body, p, "lo_scale", "number"),
                                   _field(body, p, "hi_scale", "number"))
        _check_keys(body, p, ("lo", "hi"))
        return BoxRegion(_field(body, p, "lo", "vector"), _field(body, p, "hi", "vector"))
    except PropertyError:
        raise
    except ValueError as exc:
        raise PropertyError(p, str(exc)) from None


def _parse_property(doc, path: str) -> OutputProperty:
    kind, body = _one_of(doc, path, _PROPERTY_KINDS)
    p = f"{path}.{kind}"
    try:
        if kind == "classification":
            _check_keys(body, p, ("true_label",))
            label = _field(body, p, "true_label", "int")
            if label < 0:
                raise PropertyError(f"{p}.true_label", "must be non-negative")
            return Classification(label)
        if kind == "regression_band":
            _check_keys(body, p, ("center_output", "max_dev", "output"))
            return RegressionBand(_field(body, p, "center_output", "number"), _field(body, p, "max_dev", "number"),
                                  _field(body, p, "output", "int", 0))
        _check_keys(body, p, ("rows",))
        rows = body.get("rows")
        if not isinstance(rows, list) or not rows:
            raise PropertyError(f"{p}.rows", "expected a non-empty array")
        parsed = []
        for i, r in enumerate(rows):
            rp = f"{p}.rows[{i}]"
            if not isinstance(r, dict):
                raise PropertyError(rp, "expected an object")
            _check_keys(r, rp, ("coeffs", "relation", "rhs"))
            rel = r.get("relation")
            if rel not in _NEGATION:
                raise PropertyError(f"{rp}.relation", f"expected one of {', '.join(_NEGATION)}")
            parsed.append(OutputRow(_field(r, rp, "coeffs", "vector"), rel, _field(r, rp, "rhs", "number")))
        return LinearSafe(tuple(parsed))
    except PropertyError:
        raise
    except ValueError as exc:
        raise PropertyError(p, str(exc)) from None


@dataclass(frozen=True)
class PropertyDocument:
    region: InputRegion
    prop: OutputProperty
    normalized: bool = False

    def region_for(self, norm: Optional[Normalization]) -> InputRegion:
        """The region in the network's (normalized) input space."""
        if self.normalized or norm is None:
            return self.region
        return self.region.normalized(norm)


def parse_property(text: Union[str, bytes]) -> PropertyDocument:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PropertyError("$", f"invalid JSON: {exc.msg} at line {exc.lineno}") from None
    if not isinstance(doc, dict):
        raise PropertyError("$", "expected an object")
    _check_keys(doc, "$", ("region", "property", "normalized"))
    for key in ("region", "property"):
        if key not in doc:
            raise PropertyError(f"$.{key}", "missing required field")
    normalized = doc.get("normalized", False)
    if not isinstance(normalized, bool):
        raise PropertyError("$.normalized", "expected true or false")
    return PropertyDocument(_parse_region(doc["region"], "$.region"),
                            _parse_property(doc["property"], "$.property"), normalized)


def check_dimensions(region: InputRegion, prop: OutputProperty, input_dim: int, output_dim: int) -> None:
    if region.dim != input_dim:
        raise DimensionError(f"region has {region.dim} inputs, network expects {input_dim}")
    prop.disjuncts(output_dim)
