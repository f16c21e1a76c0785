"""Bound propagation through ReLU networks.

Three propagators share one trace format:

* ``nia_forward``  -- plain interval arithmetic, no dependency tracking.
* ``sia_forward``  -- symbolic intervals, straddling ReLUs concretized to constants.

The symbolic propagators also carry a concrete interval per node, pushed
through each layer with interval arithmetic and intersected with the
envelope of the expressions. Both halves are sound, so the intersection is.
* ``slr_forward``  -- symbolic intervals, straddling ReLUs replaced by their
  tightest linear relaxation (slope ``u / (u - l)``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .interval import (
    BoundPair,
    ConcreteInterval,
    DimensionError,
    InputBox,
    SymbolicBounds,
    affine_bounds,
    interval_affine,
    outward_round,
    rounding_gamma,
)
from .network import Conv, Network, NodeId, Relu

DIVISION_GUARD = 1e-12


class NodeStatus(enum.IntEnum):
    ACTIVE = 0
    INACTIVE = 1
    OVERESTIMATED = 2
    FORCED_ACTIVE = 3
    FORCED_INACTIVE = 4

    @property
    def forced(self) -> bool:
        return self in (NodeStatus.FORCED_ACTIVE, NodeStatus.FORCED_INACTIVE)


def max_relaxation_error(lo, hi):
    """Largest pointwise gap of the chord relaxation over ``[lo, hi]``: ``-lo*hi/(hi-lo)``."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    width = hi - lo
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.where((lo < 0) & (hi > 0) & (width > 0), -lo * hi / width, 0.0)
    return err


@dataclass(frozen=True, eq=False)
class _ReluMap:
    """Per-node affine replacement of ReLU: ``eq_low -> lo_slope*eq_low + lo_off``
    and ``eq_up -> up_slope*eq_up + up_off``."""

    lo_slope: np.ndarray
    lo_off: np.ndarray
    up_slope: np.ndarray
    up_off: np.ndarray
    status: np.ndarray


def _relu_map(lower, u_low, l_up, upper, forced: Mapping[int, NodeStatus], concretize: bool,
              const_lo=None, const_hi=None) -> _ReluMap:
    """Decide each node's status and its replacement.

    ``lower``/``upper`` are the concrete node bounds; ``u_low`` is the maximum
    of the lower expression and ``l_up`` the minimum of the upper one.
    ``const_lo``/``const_hi`` are the constants used when concretizing
    (default: ``lower``/``upper``).
    """
    n = len(lower)
    status = np.full(n, NodeStatus.OVERESTIMATED, dtype=np.int8)
    status[lower >= 0] = NodeStatus.ACTIVE
    status[upper <= 0] = NodeStatus.INACTIVE
    for j, s in forced.items():
        status[j] = NodeStatus(s)
    over = status == NodeStatus.OVERESTIMATED
    keep = (status == NodeStatus.ACTIVE) | (status == NodeStatus.FORCED_ACTIVE)
    lo_slope = np.where(keep, 1.0, 0.0)
    up_slope = lo_slope.copy()
    lo_off = np.zeros(n)
    up_off = np.zeros(n)

    if concretize:
        const_lo = lower if const_lo is None else const_lo
        const_hi = upper if const_hi is None else const_hi
        lo_off[over] = const_lo[over]
        up_off[over] = const_hi[over]
        return _ReluMap(lo_slope, lo_off, up_slope, up_off, status)

    # upper side: exact when l_up >= 0, chord over [l_up, upper] otherwise
    up_slope[over & (l_up >= 0)] = 1.0
    relax_up = over & (l_up < 0)
    w_up = upper - l_up
    thin_up = relax_up & (w_up < DIVISION_GUARD)
    chord_up = relax_up & ~thin_up
    s_up = upper[chord_up] / w_up[chord_up]
    up_slope[chord_up] = s_up
    up_off[chord_up] = -s_up * l_up[chord_up]
    # degenerate width: the slope-one piece shifted up by -l still dominates ReLU
    up_slope[thin_up] = 1.0
    up_off[thin_up] = -l_up[thin_up]

    # lower side: zero when u_low <= 0, chord through the origin otherwise
    relax_lo = over & (u_low > 0)
    w_lo = u_low - lower
    thin_lo = relax_lo & (w_lo < DIVISION_GUARD)
    chord_lo = relax_lo & ~thin_lo
    lo_slope[chord_lo] = u_low[chord_lo] / w_lo[chord_lo]
    lo_slope[thin_lo] = 1.0
    return _ReluMap(lo_slope, lo_off, up_slope, up_off, status)


def _relax_layer(pre: SymbolicBounds, forced: Mapping[int, NodeStatus], concretize: bool):
    m = _relu_map(pre.lower, pre.u_low, pre.l_up, pre.upper, forced, concretize,
                  const_lo=pre.l_low, const_hi=pre.u_up)
    dead = (m.status == NodeStatus.INACTIVE) | (m.status == NodeStatus.FORCED_INACTIVE)
    # scaling and shifting round once more; a rounded chord slope is off by
    # at most an ulp times the node's range
    relaxed = (m.up_slope != 1.0) & ~dead
    extra = np.abs(m.lo_off) + np.abs(m.up_off) + np.where(relaxed, np.maximum(-pre.lower, pre.upper), 0.0)
    slack = pre.slack + rounding_gamma(3) * (pre.magnitude + extra)
    identity = (m.lo_slope == 1.0) & (m.up_slope == 1.0) & (m.lo_off == 0.0) & (m.up_off == 0.0)
    slack = np.where(identity, pre.slack, slack)
    # dead nodes and concretized constants are exact as stored
    slack = np.where(dead | ((m.lo_slope == 0.0) & (m.up_slope == 0.0)), 0.0, slack)
    post = SymbolicBounds(
        m.lo_slope[:, None] * pre.low_coef,
        m.lo_slope * pre.low_const + m.lo_off,
        m.up_slope[:, None] * pre.up_coef,
        m.up_slope * pre.up_const + m.up_off,
        pre.box,
        floor=np.where(dead, 0.0, np.maximum(pre.lower, 0.0)),
        ceil=np.where(dead, 0.0, np.maximum(pre.upper, 0.0)),
        slack=slack,
    )
    return post, m.status


def _relax_pair(pair: BoundPair, concretize: bool) -> tuple[BoundPair, NodeStatus]:
    cl, cu = pair.conc_low, pair.conc_up
    m = _relu_map(np.array([cl.lo]), np.array([cl.hi]), np.array([cu.lo]), np.array([cu.hi]), {}, concretize)
    ls, lo_off = float(m.lo_slope[0]), float(m.lo_off[0])
    us, uo = float(m.up_slope[0]), float(m.up_off[0])
    eq_low = pair.eq_low.scale(ls).shift(lo_off)
    eq_up = pair.eq_up.scale(us).shift(uo)
    # slopes are non-negative, so the envelopes map endpoint-wise
    conc_low = outward_round(ConcreteInterval(ls * cl.lo + lo_off, ls * cl.hi + lo_off))
    conc_up = outward_round(ConcreteInterval(us * cu.lo + uo, us * cu.hi + uo))
    return BoundPair(eq_low, eq_up, conc_low, conc_up), NodeStatus(int(m.status[0]))


def relax_relu(pair: BoundPair) -> tuple[BoundPair, NodeStatus]:
    """Linear relaxation of ``ReLU`` applied to one symbolic interval."""
    return _relax_pair(pair, concretize=False)


def concretize_relu(pair: BoundPair) -> tuple[BoundPair, NodeStatus]:
    """The symbolic-interval baseline: straddling nodes become the constants ``[l, u]``."""
    return _relax_pair(pair, concretize=True)


@dataclass(frozen=True, eq=False)
class PropagationTrace:
    """Everything a forward pass learned about one input box."""

    box: InputBox
    pre: dict  # relu layer index -> SymbolicBounds before ReLU
    post: dict  # relu layer index -> SymbolicBounds after ReLU
    status: dict  # relu layer index -> int8 array of NodeStatus
    output: SymbolicBounds
    overestimated_ids: tuple

    def node_status(self, node: NodeId) -> NodeStatus:
        return NodeStatus(int(self.status[node[0]][node[1]]))

    def pre_pair(self, node: NodeId) -> BoundPair:
        return self.pre[node[0]].pair(node[1])

    def output_intervals(self) -> list[ConcreteInterval]:
        return self.output.intervals()

    @property
    def output_lower(self) -> np.ndarray:
        return self.output.lower

    @property
    def output_upper(self) -> np.ndarray:
        return self.output.upper


def _check_forced(net: Network, forced: Mapping[NodeId, NodeStatus]) -> dict:
    widths = dict(net.relu_layers)
    by_layer: dict = {}
    for (li, j), s in forced.items():
        if li not in widths or not 0 <= j < widths[li]:
            raise KeyError(f"forced decision refers to unknown ReLU node {(li, j)}")
        s = NodeStatus(s)
        if s == NodeStatus.ACTIVE:
            s = NodeStatus.FORCED_ACTIVE
        elif s == NodeStatus.INACTIVE:
            s = NodeStatus.FORCED_INACTIVE
        elif not s.forced:
            raise ValueError(f"node {(li, j)} cannot be forced to {s.name}")
        by_layer.setdefault(li, {})[j] = s
    return by_layer


def _symbolic_forward(net: Network, box: InputBox, forced, concretize: bool) -> PropagationTrace:
    if box.dim != net.input_dim:
        raise DimensionError(f"box has {box.dim} dimensions, network expects {net.input_dim}")
    forced = _check_forced(net, forced or {})
    bounds = SymbolicBounds.identity(box)
    pre, post, status = {}, {}, {}
    over = []
    for idx, layer in enumerate(net.layers):
        if isinstance(layer, Relu):
            pre[idx] = bounds
            bounds, st = _relax_layer(bounds, forced.get(idx, {}), concretize)
            post[idx] = bounds
            status[idx] = st
            over.extend((idx, int(j)) for j in np.flatnonzero(st == NodeStatus.OVERESTIMATED))
        else:
            w, b = net.affine(idx)
            bounds = affine_bounds(bounds, w, b)
    return PropagationTrace(box, pre, post, status, bounds, tuple(over))


def slr_forward(net: Network, box: InputBox, forced: Optional[Mapping[NodeId, NodeStatus]] = None) -> PropagationTrace:
    return _symbolic_forward(net, box, forced, concretize=False)


def sia_forward(net: Network, box: InputBox, forced: Optional[Mapping[NodeId, NodeStatus]] = None) -> PropagationTrace:
    return _symbolic_forward(net, box, forced, concretize=True)


def nia_forward(net: Network, box: InputBox) -> list[ConcreteInterval]:
    if box.dim != net.input_dim:
        raise DimensionError(f"box has {box.dim} dimensions, network expects {net.input_dim}")
    lo, hi = box.lo.copy(), box.hi.copy()
    for idx, layer in enumerate(net.layers):
        if isinstance(layer, Relu):
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
        else:
            w, b = net.affine(idx)
            lo, hi = interval_affine(lo, hi, w, b)
    return [ConcreteInterval(float(a), float(b)) for a, b in zip(lo, hi)]


def conv_map(bounds: SymbolicBounds, layer: Conv, in_shape: tuple[int, int, int]) -> SymbolicBounds:
    """Symbolic bounds through a convolution; grids are channel-major flattened."""
    if len(bounds) != int(np.prod(in_shape)):
        raise DimensionError(f"grid of {len(bounds)} nodes does not match shape {in_shape}")
    w, b = layer.as_dense(in_shape)
    return affine_bounds(bounds, w, b)


@dataclass(frozen=True, eq=False)
class GradientInterval:
    """Interval of d(objective . F)/d(pre-activation) for every ReLU node,
    plus the same for the network inputs."""

    lo: dict  # relu layer index -> array
    hi: dict
    input_lo: np.ndarray
    input_hi: np.ndarray

    def node(self, node: NodeId) -> ConcreteInterval:
        return ConcreteInterval(float(self.lo[node[0]][node[1]]), float(self.hi[node[0]][node[1]]))


_RELU_FACTOR = {
    NodeStatus.ACTIVE: (1.0, 1.0),
    NodeStatus.FORCED_ACTIVE: (1.0, 1.0),
    NodeStatus.INACTIVE: (0.0, 0.0),
    NodeStatus.FORCED_INACTIVE: (0.0, 0.0),
    NodeStatus.OVERESTIMATED: (0.0, 1.0),
}


def interval_gradient(net: Network, trace: PropagationTrace, objective=None) -> GradientInterval:
    """Backward interval pass from ``objective . F`` (default: sum of outputs)."""
    relu_idx = [li for li, _ in net.relu_layers]
    if sorted(trace.status) != relu_idx or len(trace.output) != net.output_dim:
        raise ValueError("trace does not belong to this network")
    c = np.ones(net.output_dim) if objective is None else np.asarray(objective, dtype=float)
    if c.shape != (net.output_dim,):
        raise DimensionError(f"objective has shape {c.shape}, network has {net.output_dim} outputs")
    glo, ghi = c.copy(), c.copy()
    out_lo, out_hi = {}, {}
    for idx in range(len(net.layers) - 1, -1, -1):
        if isinstance(net.layers[idx], Relu):
            st = trace.status[idx]
            f_lo = np.array([_RELU_FACTOR[NodeStatus(int(s))][0] for s in st])
            f_hi = np.array([_RELU_FACTOR[NodeStatus(int(s))][1] for s in st])
            # factor interval lies in [0, 1], so the product hull is over endpoints
            cands = np.stack([f_lo * glo, f_lo * ghi, f_hi * glo, f_hi * ghi])
            glo, ghi = cands.min(axis=0), cands.max(axis=0)
            out_lo[idx], out_hi[idx] = glo, ghi
        else:
            w, _ = net.affine(idx)
            wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
            glo, ghi = wp.T @ glo + wn.T @ ghi, wp.T @ ghi + wn.T @ glo
    return GradientInterval(out_lo, out_hi, glo, ghi)


def split_priority(trace: PropagationTrace, grad: GradientInterval) -> list[tuple[float, NodeId]]:
    """Overestimated nodes ordered by gradient magnitude times relaxation error.

    Highest score first; ties go to the lowest ``(layer, node)``.
    """
    scored = []
    for node in trace.overestimated_ids:
        li, j = node
        pre = trace.pre[li]
        mag = max(abs(grad.lo[li][j]), abs(grad.hi[li][j]))
        err = float(max_relaxation_error(pre.lower[j], pre.upper[j]))
        scored.append((mag * err, node))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return scored


def bisect_region(box: InputBox, axis: int) -> tuple[InputBox, InputBox]:
    if not 0 <= axis < box.dim:
        raise IndexError(f"axis {axis} out of range for a {box.dim}-dimensional box")
    lo, hi = box.lo[axis], box.hi[axis]
    if not hi > lo:
        raise ValueError(f"cannot bisect zero-width axis {axis}")
    mid = lo + (hi - lo) / 2.0
    left_hi = box.hi.copy()
    left_hi[axis] = mid
    right_lo = box.lo.copy()
    right_lo[axis] = mid
    return InputBox(box.lo, left_hi), InputBox(right_lo, box.hi)
