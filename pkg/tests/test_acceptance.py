"""Acceptance criteria 1-11.

Every test records a one-line PASS/FAIL verdict with the measured figures;
the lines are printed in the terminal summary.
"""

import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from lp_oracle import random_lp, vertex_optimum
from test_network import acas_shaped_nnet

from reluverify.cli import ROUNDING_WIDTH
from reluverify.engine import EngineConfig, Verdict, refine_output_range, validate_counterexample, verify
from reluverify.fixtures import labelled_fixture, random_fixture
from reluverify.interval import BoundPair, InputBox, LinearExpression
from reluverify.lp import LpStatus, solve
from reluverify.network import forward, parse_nnet, serialize_nnet
from reluverify.oracle import exact_output_range
from reluverify.properties import PropertyError, parse_property
from reluverify.propagation import interval_gradient, nia_forward, relax_relu, sia_forward, slr_forward

ROOT = Path(__file__).resolve().parents[1]
pytestmark = pytest.mark.slow


def record(n, ok, detail, elapsed=None):
    timing = "" if elapsed is None else f" [{elapsed:.2f}s]"
    ACCEPTANCE_LINES[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}{timing}"
    print(ACCEPTANCE_LINES[n])
    return ok


@pytest.fixture(scope="module")
def fuzz_corpus():
    rng = np.random.default_rng(3)
    return [random_fixture(rng, max_relus=16) for _ in range(200)]


@pytest.fixture(scope="module")
def verdict_corpus():
    rng = np.random.default_rng(6)
    return [labelled_fixture(rng) for _ in range(100)]


@pytest.fixture(scope="module")
def timings():
    return {}


def test_c01_relaxation_formula():
    t0 = time.perf_counter()
    eq = LinearExpression([2.0, -3.0])
    out, _ = relax_relu(BoundPair.exact(eq, InputBox([0, 0], [0.5, 4 / 3])))
    low_slope = out.eq_low.coeffs / eq.coeffs
    up_slope = out.eq_up.coeffs / eq.coeffs
    err = max(np.max(np.abs(low_slope - 0.2)), np.max(np.abs(up_slope - 0.2)),
              abs(out.eq_low.constant), abs(out.eq_up.constant - 0.8))
    ok = err <= 1e-12
    record(1, ok, f"slopes {low_slope[0]:.15g}/{up_slope[0]:.15g}, offset {out.eq_up.constant:.15g}, "
                  f"max deviation {err:.1e}", time.perf_counter() - t0)
    assert ok


def test_c02_relaxation_gap():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = -np.inf
    for _ in range(10_000):
        l, u = -rng.uniform(1e-3, 50), rng.uniform(1e-3, 50)
        out, _ = relax_relu(BoundPair.exact(LinearExpression([1.0]), InputBox([l], [u])))
        z = rng.uniform(l, u, 100)
        relu = np.maximum(z, 0)
        up = out.eq_up.coeffs[0] * z + out.eq_up.constant - relu
        low = relu - (out.eq_low.coeffs[0] * z + out.eq_low.constant)
        bound = -u * l / (u - l)
        worst = max(worst, float(np.max(up)) - bound, float(np.max(low)) - bound)
    gap_ok = worst <= 1e-9

    # any other linear upper bound a*z + b >= relu on [l, u] has max gap at least m
    probe_ok = True
    for _ in range(1000):
        l, u = -rng.uniform(1e-3, 50), rng.uniform(1e-3, 50)
        m = -u * l / (u - l)
        for a in np.concatenate([rng.uniform(0, 1, 20), [0.0, 1.0, u / (u - l)]]):
            b = max(-a * l, u - a * u)
            upper_gap = max(a * l + b, a * u + b - u, b)
            lower_gap = max(-a * l, u - a * u)  # lower bound a*z, the best intercept is 0
            probe_ok &= upper_gap >= m - 1e-9 and lower_gap >= m - 1e-9
    ok = gap_ok and probe_ok
    record(2, ok, f"max(gap - bound) over 1e6 points {worst:.2e}; tightness probe "
                  f"{'held' if probe_ok else 'broken'} on 1000 instances", time.perf_counter() - t0)
    assert ok


def test_c03_soundness_fuzz(fuzz_corpus):
    t0 = time.perf_counter()
    rng = np.random.default_rng(33)
    escapes = 0
    for net, box in fuzz_corpus:
        ys = forward(net, box.sample(rng, 1000))
        for ivs in (nia_forward(net, box), sia_forward(net, box).output_intervals(),
                    slr_forward(net, box).output_intervals()):
            lo = np.array([iv.lo for iv in ivs])
            hi = np.array([iv.hi for iv in ivs])
            escapes += int(np.sum((ys < lo) | (ys > hi)))
    elapsed = time.perf_counter() - t0
    ok = escapes == 0 and elapsed < 120
    record(3, ok, f"{escapes} escaping outputs over 200 nets x 1000 samples x 3 propagators", elapsed)
    assert ok


def test_c04_width_ordering(fuzz_corpus):
    t0 = time.perf_counter()
    bad = strict = 0
    ratios = []
    for net, box in fuzz_corpus:
        nia = nia_forward(net, box)
        wn = np.array([iv.hi - iv.lo for iv in nia])
        wi = np.array([iv.hi - iv.lo for iv in sia_forward(net, box).output_intervals()])
        ws = np.array([iv.hi - iv.lo for iv in slr_forward(net, box).output_intervals()])
        # sound rounding slack may differ by a few ulps between propagators
        tol = ROUNDING_WIDTH * np.maximum(1.0, np.array([max(abs(iv.lo), abs(iv.hi)) for iv in nia]))
        bad += int(np.sum(ws > wi + tol) + np.sum(wi > wn + tol))
        strict += int(np.sum(ws > wi) + np.sum(wi > wn))
        keep = ws > tol
        ratios.extend((wn[keep] / ws[keep]).tolist())
    mean = float(np.mean(ratios))
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and mean > 1.2 and elapsed < 120
    record(4, ok, f"{bad} ordering violations ({strict} at ulp level); mean NIA/SLR width ratio {mean:.3f} "
                  f"(median {np.median(ratios):.3f}, {len(ratios)} outputs)", elapsed)
    assert ok


def test_c05_exact_at_full_refinement():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        net, box = random_fixture(rng, max_relus=12)
        got = refine_output_range(net, box, EngineConfig(workers=1))
        exact = exact_output_range(net, box)
        for a, b in zip(got, exact):
            worst = max(worst, abs(a.lo - b.lo), abs(a.hi - b.hi))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 300
    record(5, ok, f"max |refined - exact| {worst:.2e} over 50 fixtures", elapsed)
    assert ok


def _falsify(net, region, prop, rng, n=10_000):
    pts = rng.uniform(region.center - region.eps, region.center + region.eps, (n, region.dim))
    return any(prop.violated_by(y) for y in forward(net, pts))


def test_c06_verdict_correctness(verdict_corpus, timings):
    t0 = time.perf_counter()
    rng = np.random.default_rng(66)
    wrong = invalid = falsified = 0
    verdicts, solve_time = [], 0.0
    for net, region, prop, safe in verdict_corpus:
        s = time.perf_counter()
        rep = verify(net, region, prop, EngineConfig(workers=1))
        solve_time += time.perf_counter() - s
        verdicts.append(rep.verdict)
        wrong += rep.verdict is not (Verdict.SAFE if safe else Verdict.VIOLATED)
        if rep.verdict is Verdict.VIOLATED:
            invalid += not validate_counterexample(net, region, prop, rep.witness)
        elif rep.verdict is Verdict.SAFE:
            falsified += _falsify(net, region, prop, rng)
    timings["c6"] = solve_time
    timings["c6_verdicts"] = verdicts
    n_safe = sum(v is Verdict.SAFE for v in verdicts)
    elapsed = time.perf_counter() - t0
    ok = wrong == invalid == falsified == 0 and elapsed < 600
    record(6, ok, f"{100 - wrong}/100 match ground truth ({n_safe} safe); {invalid} invalid witnesses; "
                  f"{falsified} safe verdicts falsified by 10k samples; verify time {solve_time:.2f}s", elapsed)
    assert ok


def test_c07_lp_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches, worst, infeasible = 0, 0.0, 0
    for _ in range(100):
        prob = random_lp(rng)
        ok_ref, best = vertex_optimum(prob)
        out = solve(prob)
        infeasible += not ok_ref
        if (out.status is LpStatus.OPTIMAL) != ok_ref:
            mismatches += 1
        elif ok_ref:
            worst = max(worst, abs(out.value - best))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and worst <= 1e-6 and elapsed < 30
    record(7, ok, f"{mismatches} feasibility mismatches ({infeasible} infeasible LPs); "
                  f"max optimum error {worst:.1e}", elapsed)
    assert ok


def test_c08_determinism(verdict_corpus, timings):
    if "c6" not in timings:
        pytest.skip("needs criterion 6 in the same session")
    t0 = time.perf_counter()
    runs = {}
    for workers in (1, 2, 8):
        s = time.perf_counter()
        runs[workers] = [verify(net, region, prop, EngineConfig(workers=workers)).verdict
                         for net, region, prop, _ in verdict_corpus]
        runs[f"t{workers}"] = time.perf_counter() - s
    same = runs[1] == runs[2] == runs[8] == timings["c6_verdicts"]
    slowest = max(runs["t1"], runs["t2"], runs["t8"])
    ok = same and slowest < 3 * timings["c6"]
    record(8, ok, f"verdicts {'identical' if same else 'DIFFER'} for threads 1/2/8; run times "
                  f"{runs['t1']:.2f}/{runs['t2']:.2f}/{runs['t8']:.2f}s vs criterion-6 verify "
                  f"{timings['c6']:.2f}s", time.perf_counter() - t0)
    assert ok


def test_c09_monotonicity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    fixtures = [random_fixture(rng, max_relus=12) for _ in range(50)]

    def count(inherit):
        splits = bad = 0

        def check(parent, kids):
            nonlocal splits, bad
            splits += 1
            for kid in kids:
                if kid is not None:
                    bad += bool(np.any(kid[0] < parent[0] - 1e-9) or np.any(kid[1] > parent[1] + 1e-9))

        for net, box in fixtures:
            refine_output_range(net, box, EngineConfig(workers=1), on_split=check, inherit=inherit)
        return splits, bad

    splits, bad = count(True)
    _, raw_bad = count(False)
    ok = bad == 0 and splits > 0
    record(9, ok, f"{bad} children escape the parent over {splits} splits "
                  f"(without intersecting parent bounds: {raw_bad})", time.perf_counter() - t0)
    assert ok


def test_c10_gradient_containment():
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    h, checked, bad = 1e-6, 0, 0
    for _ in range(30):
        net, box = random_fixture(rng, max_relus=12)
        g = interval_gradient(net, slr_forward(net, box))
        inner = InputBox(box.lo + 2 * h, box.hi - 2 * h)
        for x in inner.sample(rng, 100):
            for i in range(net.input_dim):
                e = np.zeros(net.input_dim)
                e[i] = h
                fd = float(np.sum(forward(net, x + e) - forward(net, x - e)) / (2 * h))
                checked += 1
                bad += not (g.input_lo[i] - 1e-6 <= fd <= g.input_hi[i] + 1e-6)
    ok = bad == 0
    record(10, ok, f"{bad}/{checked} finite-difference input gradients outside the interval gradient",
           time.perf_counter() - t0)
    assert ok


REJECTED = [
    {"region": {"l3": {"center": [0], "eps": 1}}, "property": {"classification": {"true_label": 0}}},
    {"region": {"linf": {"center": [0]}}, "property": {"classification": {"true_label": 0}}},
    {"region": {"linf": {"center": [0], "eps": -1}}, "property": {"classification": {"true_label": 0}}},
    {"region": {"box": {"lo": [0], "hi": [1]}}},
    {"region": {"box": {"lo": [0], "hi": [1]}}, "property": {"linear_safe": {"rows": [
        {"coeffs": [1], "relation": "!=", "rhs": 0}]}}},
    {"region": {"contrast": {"center": [1], "lo_scale": 0, "hi_scale": 2}}, "property": {"classification": {"true_label": 0}}},
    {"region": {"linf": {"center": ["a"], "eps": 1}}, "property": {"classification": {"true_label": 0}}},
]


def test_c11_format_contract():
    t0 = time.perf_counter()
    net = parse_nnet(acas_shaped_nnet(np.random.default_rng(11)))
    again = parse_nnet(serialize_nnet(net))
    x = np.random.default_rng(12).uniform(-1, 1, (50, 5))
    round_trip = (again.relu_count == net.relu_count
                  and all(np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
                          for a, b in zip(net.layers[::2], again.layers[::2]))
                  and np.array_equal(forward(net, x), forward(again, x)))

    accepted = sorted(itertools.chain((ROOT / "samples").glob("*property*.json"),
                                      (ROOT / "samples").glob("example_*.json"),
                                      (ROOT / "tests" / "data").glob("*.json")))
    accepted = [p for p in accepted if "network" not in p.name]
    n_accepted = 0
    for p in accepted:
        parse_property(p.read_bytes())
        n_accepted += 1
    # control: the same shapes with the defect removed do parse
    parse_property(json.dumps({"region": {"contrast": {"center": [1], "lo_scale": 0.5, "hi_scale": 2}},
                               "property": {"classification": {"true_label": 0}}}))
    n_rejected = 0
    for doc in REJECTED:
        try:
            parse_property(json.dumps(doc))
        except PropertyError:
            n_rejected += 1
    ok = net.relu_count == 300 and round_trip and n_accepted == len(accepted) > 0 and n_rejected == len(REJECTED)
    record(11, ok, f"ACAS-shaped net has {net.relu_count} ReLUs, round trip {'exact' if round_trip else 'BROKEN'}; "
                   f"{n_accepted} property files accepted, {n_rejected}/{len(REJECTED)} malformed rejected",
           time.perf_counter() - t0)
    assert ok
