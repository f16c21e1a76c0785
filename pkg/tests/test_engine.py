import itertools

import numpy as np
import pytest

from reluverify import engine as engine_mod
from reluverify.engine import (
    EngineConfig,
    RefinementTask,
    Verdict,
    VerdictReport,
    combine,
    refine_output_range,
    validate_counterexample,
    verify,
)
from reluverify.fixtures import example_box, example_network, labelled_fixture, random_fixture
from reluverify.interval import InputBox
from reluverify.lp import LpOutcome, LpStatus, Relation
from reluverify.network import forward
from reluverify.oracle import exact_output_range
from reluverify.properties import (
    BoxRegion,
    Classification,
    L1Region,
    LInfRegion,
    LinearSafe,
    RegressionBand,
    brightness_region,
    contrast_region,
)
from reluverify.propagation import NodeStatus, slr_forward

from conftest import dense_net

ONE = EngineConfig(workers=1)


def example_region():
    box = example_box()
    return BoxRegion(box.lo, box.hi)


def greater_than(t):
    return LinearSafe([([1.0], ">", t)])


class TestVerify:
    def test_safe_without_refinement(self):
        net = dense_net(([[1.0, 1.0]], [5.0]), ([[1.0]], [0.0]))
        report = verify(net, LInfRegion([0, 0], 1), greater_than(2.5), ONE)
        assert report.verdict is Verdict.SAFE
        assert report.stats.max_depth == 0 and report.stats.lp_calls == 0

    def test_example_needs_one_split(self):
        report = verify(example_network(), example_region(), greater_than(3.3), ONE)
        assert report.verdict is Verdict.SAFE
        assert report.stats.max_depth == 1 and report.stats.tasks_explored == 3

    def test_example_violation(self):
        report = verify(example_network(), example_region(), greater_than(3.6), ONE)
        assert report.verdict is Verdict.VIOLATED
        assert example_region().contains(report.witness)
        assert report.outputs[0] <= 3.6

    def test_grid_search_violation(self, rng):
        net = dense_net(([[1.0, -1.0], [-1.0, 1.0]], [0.0, 0.0]), ([[1.0, 1.0]], [0.0]))
        region = LInfRegion([0.0, 0.0], 0.5)
        prop = LinearSafe([([1.0], "<=", 0.9)])  # |x - y| <= 0.9
        g = np.linspace(-0.5, 0.5, 100)
        grid = np.array(list(itertools.product(g, g)))
        assert np.any(forward(net, grid)[:, 0] > 0.9)
        report = verify(net, region, prop, ONE)
        assert report.verdict is Verdict.VIOLATED
        assert region.contains(report.witness) and report.outputs[0] > 0.9

    def test_classification(self):
        net = dense_net(([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]), ([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]))
        assert verify(net, LInfRegion([1.0, 0.0], 0.4), Classification(0), ONE).verdict is Verdict.SAFE
        report = verify(net, LInfRegion([1.0, 0.0], 0.6), Classification(0), ONE)
        assert report.verdict is Verdict.VIOLATED

    def test_regression_band(self):
        net = dense_net(([[1.0], [-1.0]], [0.0, 0.0]), ([[1.0, 1.0]], [0.0]))  # |x|
        assert verify(net, LInfRegion([0.0], 1.0), RegressionBand(0.5, 0.501), ONE).verdict is Verdict.SAFE
        # the maximum sits exactly on the band edge: never a false counterexample
        assert verify(net, LInfRegion([0.0], 1.0), RegressionBand(0.5, 0.5), ONE).verdict is not Verdict.VIOLATED
        assert verify(net, LInfRegion([0.0], 1.0), RegressionBand(0.5, 0.4), ONE).verdict is Verdict.VIOLATED

    def test_depth_limit_reports_timeout(self):
        report = verify(example_network(), example_region(), greater_than(3.3), EngineConfig(max_depth=0, workers=1))
        assert report.verdict is Verdict.TIMEOUT and "depth" in report.reason

    def test_wall_clock_timeout(self):
        report = verify(example_network(), example_region(), greater_than(3.3), EngineConfig(timeout=1e-9, workers=1))
        assert report.verdict is Verdict.TIMEOUT

    def test_solver_failure_surfaces(self, monkeypatch):
        monkeypatch.setattr(engine_mod, "solve", lambda lp: LpOutcome(LpStatus.ITERATION_LIMIT))
        report = verify(example_network(), example_region(), greater_than(3.3), ONE)
        assert report.verdict is Verdict.SOLVER_FAILURE

    def test_dimension_checks(self):
        with pytest.raises(ValueError):
            verify(example_network(), LInfRegion([0.0], 1.0), greater_than(0), ONE)
        with pytest.raises(ValueError):
            verify(example_network(), example_region(), Classification(3), ONE)

    def test_debug_logging(self, caplog):
        with caplog.at_level("DEBUG", logger="reluverify"):
            verify(example_network(), example_region(), greater_than(3.3), ONE)
        assert any("splitting node (1, 0)" in r.getMessage() for r in caplog.records)

    def test_oracle_labelled_safe_fixtures(self):
        rng = np.random.default_rng(37)
        checked = 0
        while checked < 37:
            net, region, prop, safe = labelled_fixture(rng)
            if not safe:
                continue
            assert verify(net, region, prop, ONE).verdict is Verdict.SAFE
            checked += 1

    def test_safe_survives_sampling(self, rng):
        for _ in range(10):
            net, region, prop, safe = labelled_fixture(rng)
            report = verify(net, region, prop, ONE)
            if report.verdict is Verdict.SAFE:
                box = region.encode().box
                assert not any(prop.violated_by(y) for y in forward(net, box.sample(rng, 2000)))

    @pytest.mark.parametrize("workers", [2, 8])
    def test_worker_count_does_not_change_verdict(self, workers):
        rng = np.random.default_rng(8)
        for _ in range(15):
            net, region, prop, _ = labelled_fixture(rng)
            a = verify(net, region, prop, ONE).verdict
            b = verify(net, region, prop, EngineConfig(workers=workers, rebalance_interval=1)).verdict
            assert a is b


class TestScalarRegions:
    def _dense_scan(self, net, region, prop, n=20001):
        s = np.linspace(region.s_lo, region.s_hi, n)
        pts = region.base + s[:, None] * region.direction
        return not any(prop.violated_by(y) for y in forward(net, pts))

    def test_brightness_matches_dense_scan(self, rng):
        agree = 0
        for _ in range(12):
            net, box = random_fixture(rng, max_relus=10, n_outputs=1)
            region = brightness_region(box.center, float(rng.uniform(0.1, 1.0)))
            ys = forward(net, region.base + np.linspace(region.s_lo, region.s_hi, 2001)[:, None] * region.direction)
            t = float(np.min(ys)) + float(rng.choice([-0.05, 0.05])) * float(np.ptp(ys) + 1e-3)
            prop = greater_than(t)
            report = verify(net, region, prop, ONE)
            if report.verdict is Verdict.TIMEOUT:
                continue
            assert (report.verdict is Verdict.SAFE) == self._dense_scan(net, region, prop)
            agree += 1
        assert agree >= 10

    def test_contrast(self):
        net = dense_net(([[1.0, 1.0]], [0.0]), ([[1.0]], [0.0]))
        region = contrast_region([1.0, 2.0], 0.5, 1.5)  # output = 3s
        assert verify(net, region, LinearSafe([([1.0], "<=", 4.6)]), ONE).verdict is Verdict.SAFE
        report = verify(net, region, LinearSafe([([1.0], "<=", 4.4)]), ONE)
        assert report.verdict is Verdict.VIOLATED and report.outputs[0] > 4.4

    def test_point_region_is_concrete_check(self):
        net, box = example_network(), example_box()
        region = brightness_region(box.center, 0.0)
        value = forward(net, box.center)[0]
        assert verify(net, region, greater_than(value - 1e-6), ONE).verdict is Verdict.SAFE
        assert verify(net, region, greater_than(value + 1e-6), ONE).verdict is Verdict.VIOLATED


class TestL1:
    def test_l1_verdicts_are_sound(self, rng):
        for _ in range(10):
            net, box = random_fixture(rng, max_relus=8, n_outputs=1)
            region = L1Region(box.center, float(rng.uniform(0.1, 0.8)))
            prop = greater_than(float(forward(net, box.center)[0]) - 0.3)
            report = verify(net, region, prop, ONE)
            if report.verdict is Verdict.VIOLATED:
                assert region.contains(report.witness)
            elif report.verdict is Verdict.SAFE:
                steps = rng.laplace(0, region.eps / 2, (2000, box.dim))
                pts = np.array([region.project(box.center + v) for v in steps])
                assert not any(prop.violated_by(y) for y in forward(net, pts))


class TestValidation:
    def test_outside_ball(self):
        net, box = example_network(), example_box()
        assert not validate_counterexample(net, LInfRegion(box.center, 0.1), greater_than(100), box.center + 0.2)

    def test_correct_center(self):
        net, box = example_network(), example_box()
        assert not validate_counterexample(net, LInfRegion(box.center, 0.1), greater_than(0), box.center)

    def test_grid_point(self):
        net, box = example_network(), example_box()
        assert validate_counterexample(net, example_region(), greater_than(3.6), [0.5, 0.0])

    def test_wrong_length(self):
        assert not validate_counterexample(example_network(), example_region(), greater_than(3.6), [0.5])

    def test_report_rechecks_witness(self):
        net = example_network()
        with pytest.raises(ValueError):
            VerdictReport.violated(net, example_region(), greater_than(3.3), [0.25, 0.5], engine_mod.Stats())


class TestTasks:
    def test_split_rows_follow_decisions(self):
        net, box = example_network(), example_box()
        tr = slr_forward(net, box)
        root = RefinementTask({}, (), example_region())
        inactive, active = root.split((1, 0), tr)
        assert inactive.forced == {(1, 0): NodeStatus.FORCED_INACTIVE}
        assert inactive.split_rows[0].relation is Relation.LE
        assert active.split_rows[0].relation is Relation.GE
        assert active.depth == 1
        with pytest.raises(ValueError):
            active.split((1, 0), tr)

    def test_invariants(self):
        with pytest.raises(ValueError):
            RefinementTask({(1, 0): NodeStatus.FORCED_ACTIVE}, (), example_region())
        with pytest.raises(ValueError):
            RefinementTask({(1, 0): NodeStatus.OVERESTIMATED}, (None,), example_region())

    def test_aggregation_order(self):
        order = [Verdict.SAFE, Verdict.TIMEOUT, Verdict.SOLVER_FAILURE, Verdict.VIOLATED]
        for a, b in itertools.product(order, order):
            assert combine(a, b) is combine(b, a) is max(a, b, key=order.index)

    def test_config_validation(self):
        for bad in ({"timeout": 0}, {"workers": 0}, {"max_depth": -1}, {"rebalance_interval": 0}):
            with pytest.raises(ValueError):
                EngineConfig(**bad)


class TestRefineOutputRange:
    def test_no_overestimation_equals_relaxation(self):
        net = dense_net(([[1.0, 1.0]], [5.0]), ([[1.0]], [0.0]))
        box = InputBox([0, 0], [1, 1])
        assert refine_output_range(net, box) == slr_forward(net, box).output_intervals()

    def test_full_split_is_exact(self, rng):
        for _ in range(8):
            net, box = random_fixture(rng, max_relus=10)
            got = refine_output_range(net, box)
            for a, b in zip(got, exact_output_range(net, box)):
                assert a.lo == pytest.approx(b.lo, abs=1e-6) and a.hi == pytest.approx(b.hi, abs=1e-6)

    def test_one_split_tightens_example(self):
        (iv,) = refine_output_range(example_network(), example_box(), EngineConfig(max_depth=1, workers=1))
        assert iv.lo == pytest.approx(3.5) and iv.lo > slr_forward(example_network(), example_box()).output_lower[0]

    def test_children_inside_parent(self, rng):
        seen = []

        def check(parent, kids):
            seen.append(1)
            for kid in kids:
                if kid is not None:
                    assert np.all(kid[0] >= parent[0] - 1e-9) and np.all(kid[1] <= parent[1] + 1e-9)

        for _ in range(8):
            net, box = random_fixture(rng, max_relus=10)
            refine_output_range(net, box, on_split=check)
        assert seen

    def test_without_inheritance_still_sound(self, rng):
        for _ in range(5):
            net, box = random_fixture(rng, max_relus=10)
            got = refine_output_range(net, box, inherit=False)
            for a, b in zip(got, exact_output_range(net, box)):
                assert a.lo <= b.lo + 1e-6 and b.hi <= a.hi + 1e-6
