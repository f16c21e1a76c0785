"""Directed constraint refinement: relax, check with LP, validate, split, repeat."""

from __future__ import annotations

import enum
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .interval import ConcreteInterval, InputBox, round_down, round_up, rounding_gamma
from .lp import Constraint, LinearProgram, LpStatus, Relation, solve
from .network import Network, NodeId, forward
from .properties import (
    InputRegion,
    OutputProperty,
    SegmentRegion,
    build_violation_systems,
    check_dimensions,
    concrete_upper,
)
from .propagation import NodeStatus, PropagationTrace, interval_gradient, slr_forward, split_priority

log = logging.getLogger("reluverify.engine")


class Verdict(str, enum.Enum):
    SAFE = "safe"
    VIOLATED = "violated"
    TIMEOUT = "timeout"
    SOLVER_FAILURE = "solver_failure"


# aggregation order: a single violated leaf decides, then failures, then incompleteness
_RANK = {Verdict.SAFE: 0, Verdict.TIMEOUT: 1, Verdict.SOLVER_FAILURE: 2, Verdict.VIOLATED: 3}


def combine(a: Verdict, b: Verdict) -> Verdict:
    return a if _RANK[a] >= _RANK[b] else b


@dataclass(frozen=True)
class EngineConfig:
    timeout: float = 3600.0
    max_depth: Optional[int] = None  # None: number of ReLUs in the network
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    rebalance_interval: int = 8
    bisection_depth: int = 20

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.rebalance_interval < 1:
            raise ValueError("rebalance_interval must be at least 1")
        if self.bisection_depth < 0:
            raise ValueError("bisection_depth must be non-negative")

    def depth_limit(self, net: Network) -> int:
        return net.relu_count if self.max_depth is None else self.max_depth


@dataclass(frozen=True)
class RefinementTask:
    """One node of the search tree.

    ``split_rows`` holds the rows recorded when each node was split:
    ``eq_up >= 0`` for a forced-active node, ``eq_low <= 0`` for a forced-inactive one.
    """

    forced: Mapping[NodeId, NodeStatus]
    split_rows: tuple
    region: InputRegion
    bisections: int = 0

    def __post_init__(self):
        if len(self.split_rows) != len(self.forced):
            raise ValueError("every forced node needs exactly one split row")
        for node, s in self.forced.items():
            if not NodeStatus(s).forced:
                raise ValueError(f"node {node} has non-forced status {s}")

    @property
    def depth(self) -> int:
        return len(self.forced)

    def split(self, node: NodeId, trace: PropagationTrace) -> tuple["RefinementTask", "RefinementTask"]:
        """Inactive child first, then active."""
        if node in self.forced:
            raise ValueError(f"node {node} is already split")
        inactive = dict(self.forced)
        inactive[node] = NodeStatus.FORCED_INACTIVE
        active = dict(self.forced)
        active[node] = NodeStatus.FORCED_ACTIVE
        return (
            RefinementTask(inactive, self.split_rows + (split_row(trace, node, NodeStatus.FORCED_INACTIVE),), self.region),
            RefinementTask(active, self.split_rows + (split_row(trace, node, NodeStatus.FORCED_ACTIVE),), self.region),
        )


def split_row(trace: PropagationTrace, node: NodeId, decision: NodeStatus) -> Constraint:
    """The input-space restriction implied by forcing ``node``."""
    li, j = node
    pre = trace.pre[li]
    if decision == NodeStatus.FORCED_ACTIVE:
        return Constraint(pre.up_coef[j], Relation.GE, -pre.up_const[j] - pre.slack[j])
    if decision == NodeStatus.FORCED_INACTIVE:
        return Constraint(pre.low_coef[j], Relation.LE, -pre.low_const[j] + pre.slack[j])
    raise ValueError(f"{decision!r} is not a split decision")


def current_rows(trace: PropagationTrace, forced: Mapping[NodeId, NodeStatus]) -> list[Constraint]:
    """Split rows for every forced node, rebuilt from a trace computed under ``forced``.

    These only get tighter as more upstream nodes are fixed.
    """
    return [split_row(trace, node, NodeStatus(s)) for node, s in sorted(forced.items())]


@dataclass
class Stats:
    lp_calls: int = 0
    tasks_explored: int = 0
    max_depth: int = 0
    avg_depth: float = 0.0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "lp_calls": self.lp_calls,
            "tasks_explored": self.tasks_explored,
            "max_depth": self.max_depth,
            "avg_depth": self.avg_depth,
            "wall_time": self.wall_time,
        }


@dataclass(frozen=True)
class VerdictReport:
    verdict: Verdict
    stats: Stats
    witness: Optional[np.ndarray] = None
    outputs: Optional[np.ndarray] = None
    reason: str = ""

    @classmethod
    def violated(cls, net: Network, region: InputRegion, prop: OutputProperty, witness, stats: Stats,
                 reason: str = "") -> "VerdictReport":
        witness = np.asarray(witness, dtype=float)
        if not validate_counterexample(net, region, prop, witness):
            raise ValueError("witness does not violate the property inside the region")
        return cls(Verdict.VIOLATED, stats, witness, forward(net, witness), reason)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "witness": None if self.witness is None else [float(v) for v in self.witness],
            "outputs": None if self.outputs is None else [float(v) for v in self.outputs],
            "reason": self.reason,
            "stats": self.stats.to_dict(),
        }


def validate_counterexample(net: Network, region: InputRegion, prop: OutputProperty, witness,
                            tol: float = 0.0) -> bool:
    w = np.asarray(witness, dtype=float).reshape(-1)
    if w.shape[0] != net.input_dim or not np.all(np.isfinite(w)):
        return False
    if not region.contains(w, tol):
        return False
    return prop.violated_by(forward(net, w))


# ---------------------------------------------------------------- task outcome


class _Cancelled(Exception):
    pass


@dataclass
class _Outcome:
    verdict: Optional[Verdict]  # None: the task was split
    depth: int
    lp_calls: int = 0
    children: tuple = ()
    witness: Optional[np.ndarray] = None
    reason: str = ""


class _Solver:
    """Processes one task; shared read-only state for all workers."""

    def __init__(self, net: Network, region: InputRegion, prop: OutputProperty, cfg: EngineConfig,
                 deadline: float, cancel: threading.Event):
        self.net, self.region, self.prop, self.cfg = net, region, prop, cfg
        self.depth_limit = cfg.depth_limit(net)
        self.deadline = deadline
        self.cancel = cancel

    def _checkpoint(self) -> None:
        if self.cancel.is_set():
            raise _Cancelled
        if time.monotonic() > self.deadline:
            raise TimeoutError

    def process(self, task: RefinementTask) -> _Outcome:
        region = task.region
        enc = region.encode()
        trace = slr_forward(self.net, enc.box, task.forced)
        rows = list(task.split_rows) + current_rows(trace, task.forced)
        systems = build_violation_systems(self.prop, trace, enc, rows)
        d = self.net.input_dim
        out = _Outcome(None, task.depth)
        pending = []
        for system in systems:
            dj = system.disjunct
            if concrete_upper(trace, dj.coeffs) < dj.rhs:
                continue
            self._checkpoint()
            out.lp_calls += 1
            result = solve(system.lp)
            if result.status is LpStatus.ITERATION_LIMIT:
                out.verdict, out.reason = Verdict.SOLVER_FAILURE, "simplex pivot limit reached"
                return out
            if result.status is not LpStatus.OPTIMAL:
                continue
            x = result.solution[:d]
            for cand in (region.project(x), x):
                if validate_counterexample(self.net, self.region, self.prop, cand):
                    out.verdict, out.witness = Verdict.VIOLATED, cand
                    return out
            pending.append(dj)
        if not pending:
            out.verdict = Verdict.SAFE
            return out

        if isinstance(region, SegmentRegion):
            if task.bisections >= self.cfg.bisection_depth or not region.s_hi > region.s_lo:
                out.verdict, out.reason = Verdict.TIMEOUT, "bisection depth exhausted"
                return out
            out.children = tuple(RefinementTask(task.forced, task.split_rows, half, task.bisections + 1)
                                 for half in region.bisect())
            return out

        if task.depth >= self.depth_limit:
            out.verdict, out.reason = Verdict.TIMEOUT, "maximum refinement depth reached"
            return out
        grad = interval_gradient(self.net, trace, pending[0].coeffs)
        ranked = split_priority(trace, grad)
        if not ranked:
            out.verdict, out.reason = Verdict.TIMEOUT, "no overestimated node left to split"
            return out
        node = ranked[0][1]
        log.debug("depth %d: splitting node %s (score %.3g)", task.depth, node, ranked[0][0])
        out.children = task.split(node, trace)
        return out


# ---------------------------------------------------------------- worker pool


class _Search:
    """Depth-first search on per-worker deques with periodic rebalancing.

    A worker pops its newest task. Every ``rebalance_interval`` completed tasks,
    each idle worker takes the older half of the longest deque.
    """

    def __init__(self, solver: _Solver, workers: int, rebalance_interval: int):
        self.solver = solver
        self.n = workers
        self.interval = rebalance_interval
        self.deques = [deque() for _ in range(workers)]
        self.cond = threading.Condition()
        self.pending = 0
        self.completed = 0
        self.verdict = Verdict.SAFE
        self.witness = None
        self.reason = ""
        self.lp_calls = 0
        self.leaf_depths: list[int] = []
        self.max_depth = 0
        self.error: Optional[BaseException] = None

    def _rebalance(self) -> None:
        for i, q in enumerate(self.deques):
            if q:
                continue
            donor = max(self.deques, key=len)
            k = len(donor) // 2
            for _ in range(k):
                q.append(donor.popleft())

    def _record(self, out: _Outcome) -> None:
        self.lp_calls += out.lp_calls
        self.max_depth = max(self.max_depth, out.depth)
        if out.verdict is None:
            return
        self.leaf_depths.append(out.depth)
        if _RANK[out.verdict] > _RANK[self.verdict]:
            self.verdict, self.reason = out.verdict, out.reason
            if out.verdict is Verdict.VIOLATED:
                self.witness = out.witness
                self.solver.cancel.set()

    def _worker(self, i: int) -> None:
        q = self.deques[i]
        while True:
            with self.cond:
                while not q and self.pending > 0 and not self.solver.cancel.is_set():
                    self.cond.wait()
                if self.pending == 0 or self.solver.cancel.is_set():
                    self.cond.notify_all()
                    return
                task = q.pop()
            try:
                out = self.solver.process(task)
            except _Cancelled:
                out = _Outcome(Verdict.SAFE, task.depth)  # verdict already decided elsewhere
            except TimeoutError:
                out = _Outcome(Verdict.TIMEOUT, task.depth, reason="wall-clock timeout")
                self.solver.cancel.set()
            except BaseException as exc:  # surface worker crashes in the caller
                with self.cond:
                    self.error = exc
                    self.solver.cancel.set()
                    self.cond.notify_all()
                return
            with self.cond:
                self._record(out)
                for child in reversed(out.children):
                    q.append(child)
                self.pending += len(out.children) - 1
                self.completed += 1
                if self.completed % self.interval == 0:
                    self._rebalance()
                self.cond.notify_all()

    def run(self, root: RefinementTask) -> None:
        self.deques[0].append(root)
        self.pending = 1
        if self.n == 1:
            self._worker(0)
        else:
            threads = [threading.Thread(target=self._worker, args=(i,), daemon=True) for i in range(self.n)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        if self.error is not None:
            raise self.error


def verify(net: Network, region: InputRegion, prop: OutputProperty,
           cfg: Optional[EngineConfig] = None) -> VerdictReport:
    """Prove ``prop`` over ``region`` or return a validated counterexample."""
    cfg = cfg or EngineConfig()
    check_dimensions(region, prop, net.input_dim, net.output_dim)
    start = time.monotonic()
    cancel = threading.Event()
    solver = _Solver(net, region, prop, cfg, start + cfg.timeout, cancel)
    search = _Search(solver, cfg.workers, cfg.rebalance_interval)
    search.run(RefinementTask({}, (), region))
    depths = search.leaf_depths
    stats = Stats(
        lp_calls=search.lp_calls,
        tasks_explored=search.completed,
        max_depth=search.max_depth,
        avg_depth=float(np.mean(depths)) if depths else 0.0,
        wall_time=time.monotonic() - start,
    )
    log.debug("verdict %s after %d tasks, %d LPs", search.verdict.value, stats.tasks_explored, stats.lp_calls)
    if search.verdict is Verdict.VIOLATED:
        return VerdictReport.violated(net, region, prop, search.witness, stats)
    return VerdictReport(search.verdict, stats, reason=search.reason)


# ------------------------------------------------------- refined output ranges


def _lp_bounds(trace: PropagationTrace, box: InputBox, rows: Sequence[Constraint]) -> Optional[tuple]:
    """Per-output ``[min eq_low, max eq_up]`` subject to ``rows``, or ``None`` if empty."""
    out = trace.output
    lo, hi = out.lower.copy(), out.upper.copy()
    if not rows:
        return lo, hi
    # the expressions' own error plus the rounding of evaluating them
    err = out.slack + rounding_gamma(box.dim + 1) * out.magnitude
    for k in range(len(out)):
        res = solve(LinearProgram(out.low_coef[k], rows, box.lo, box.hi, "min"))
        if res.status is LpStatus.INFEASIBLE:
            return None
        if res.status is not LpStatus.OPTIMAL:
            raise RuntimeError(f"LP failed while bounding output {k}: {res.status.value}")
        lo[k] = max(lo[k], round_down(res.value + out.low_const[k] - err[k]))
        res = solve(LinearProgram(out.up_coef[k], rows, box.lo, box.hi, "max"))
        if res.status is not LpStatus.OPTIMAL:
            raise RuntimeError(f"LP failed while bounding output {k}: {res.status.value}")
        hi[k] = min(hi[k], round_up(res.value + out.up_const[k] + err[k]))
    return lo, hi


SplitObserver = Callable[[tuple, Sequence[Optional[tuple]]], None]


def refine_output_range(net: Network, box: InputBox, cfg: Optional[EngineConfig] = None,
                        on_split: Optional[SplitObserver] = None, inherit: bool = True) -> list[ConcreteInterval]:
    """Output bounds after splitting overestimated nodes down to ``cfg.max_depth``.

    Each child's bounds come from LPs over its split rows; the result is the hull
    of the leaves. ``on_split(parent, children)`` sees every split step, with
    ``None`` for a child whose input set is empty.

    A child's input set lies inside its parent's, so the parent's bounds still
    hold there; with ``inherit`` they are intersected in. Without it a child can
    come out looser, because the chord lower bound is not monotone in ``[l, u]``.
    """
    cfg = cfg or EngineConfig(workers=1)
    limit = cfg.depth_limit(net)
    root = RefinementTask({}, (), None)  # type: ignore[arg-type]

    def bound(task: RefinementTask):
        trace = slr_forward(net, box, task.forced)
        rows = list(task.split_rows) + current_rows(trace, task.forced)
        return trace, _lp_bounds(trace, box, rows)

    lo = np.full(net.output_dim, np.inf)
    hi = np.full(net.output_dim, -np.inf)
    trace, b = bound(root)
    stack = [(root, trace, b)]
    while stack:
        task, trace, b = stack.pop()
        if not trace.overestimated_ids or task.depth >= limit:
            lo, hi = np.minimum(lo, b[0]), np.maximum(hi, b[1])
            continue
        grad = interval_gradient(net, trace)
        node = split_priority(trace, grad)[0][1]
        kids = []
        for child in task.split(node, trace):
            ctrace, cb = bound(child)
            if cb is not None and inherit:
                cb = (np.maximum(cb[0], b[0]), np.minimum(cb[1], b[1]))
            kids.append(cb)
            if cb is not None:
                stack.append((child, ctrace, cb))
        if on_split is not None:
            on_split(b, kids)
    if not np.all(np.isfinite(lo)):
        raise ValueError("input region is empty")
    return [ConcreteInterval(float(a), float(c)) for a, c in zip(lo, hi)]
