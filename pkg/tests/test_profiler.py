import math

import pytest
from hypothesis import given, settings, strategies as st

from hammerlab.commands import TimingParams
from hammerlab.device import (
    BehaviorClass,
    DeviceConfig,
    ThresholdDist,
    VendorProfile,
    builtin_profiles,
)
from hammerlab.errors import BudgetError, CalibrationError, ConfigurationError, HammerLabError, UndefinedMetricError
from hammerlab.patterns import AttackModel
from hammerlab.profiler import (
    BUCKET_COLORS,
    CALIBRATION_TARGETS,
    CalibrationTarget,
    ProfileResult,
    SweepPlan,
    calibrate,
    flip_curve,
    persistence_map,
    run_sweep,
    stability,
    stability_series,
)

CONFIG = DeviceConfig(16, 256, seed=9, hc_max=None)
LEVELS = (1000, 3000, 10000)


def profile(cls="REDUCED", w_same=0.7, noise=0.0):
    return VendorProfile("t", 1.0, w_same, ThresholdDist(6000.0, 0.6), noise, BehaviorClass(cls))


def plan(**kw):
    base = dict(profile=profile(), config=CONFIG, hc_levels=LEVELS, trials=2, victim_rows=(4, 10))
    base.update(kw)
    return SweepPlan(**base)


@pytest.fixture(scope="module")
def reduced():
    return run_sweep(plan())


@pytest.fixture(scope="module")
def noisy():
    return run_sweep(plan(profile=profile(noise=0.3), trials=4))


class TestPlan:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(hc_levels=()),
            dict(hc_levels=(10, 10)),
            dict(hc_levels=(20, 10)),
            dict(hc_levels=(1, 1_000_001)),
            dict(models=()),
            dict(models=("SG", "SG")),
            dict(trials=0),
            dict(victim_rows=()),
            dict(victim_rows=(15,)),
            dict(fill=2),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises((ConfigurationError, ValueError)):
            plan(**kw)

    def test_unknown_model(self):
        with pytest.raises(ValueError):
            plan(models=("XX",))


class TestSweep:
    def test_zero_hc(self):
        r = run_sweep(plan(hc_levels=(0,)))
        assert all(len(v) == 0 for v in r.flips.values())

    def test_grid_complete(self, reduced):
        assert len(reduced.flips) == 3 * len(LEVELS) * 2

    def test_incomplete_grid_rejected(self, reduced):
        flips = dict(reduced.flips)
        flips.pop(next(iter(flips)))
        with pytest.raises(HammerLabError):
            ProfileResult(reduced.plan, flips)

    def test_deterministic_and_order_free(self, reduced):
        again = run_sweep(plan(), workers=3)
        assert again.flips == reduced.flips

    def test_counts_non_decreasing(self, reduced):
        for m in ("SG", "VC", "DB"):
            for t in range(2):
                c = [reduced.count(m, h, t) for h in LEVELS]
                assert c == sorted(c)

    def test_nesting(self, reduced):
        for h in LEVELS:
            assert reduced.union("SG", h) <= reduced.union("VC", h) <= reduced.union("DB", h)
        assert reduced.count("DB", LEVELS[-1], 0) > reduced.count("VC", LEVELS[-1], 0) > 0

    def test_flips_stay_on_victims(self, reduced):
        rows = {r for cells in reduced.flips.values() for r, _ in cells}
        assert rows <= {4, 10}

    def test_errors_carry_grid_point(self):
        timing = TimingParams(t_refw=0.833 * 39 * 2000)
        with pytest.raises(BudgetError) as info:
            run_sweep(plan(timing=timing, hc_levels=(100, 5000)))
        assert info.value.grid_point["hc"] == 5000
        assert "hc=5000" in str(info.value)

    def test_trials_differ_only_by_jitter(self, noisy):
        counts = noisy.counts("DB", LEVELS[-1])
        assert len(set(counts)) > 1

    def test_unknown_model_lookup(self, reduced):
        r = run_sweep(plan(models=("SG",), hc_levels=(10,)))
        with pytest.raises(KeyError):
            r.counts("DB", 10)
        with pytest.raises(KeyError):
            flip_curve(reduced, "XX")


class TestJsonl:
    def test_round_trip(self, noisy):
        text = noisy.to_jsonl()
        back = ProfileResult.from_jsonl(text)
        assert back.flips == noisy.flips
        assert back.plan == noisy.plan
        assert back.to_jsonl() == text

    def test_count_mismatch(self, reduced):
        lines = reduced.to_jsonl().splitlines()
        lines[-1] = lines[-1].replace('"count": ', '"count": 1')
        with pytest.raises(ConfigurationError):
            ProfileResult.from_jsonl("\n".join(lines))

    def test_missing_meta(self):
        with pytest.raises(ConfigurationError):
            ProfileResult.from_jsonl('{"type": "point"}\n')


class TestCurves:
    def test_recount(self, noisy):
        for m in ("SG", "VC", "DB"):
            for p in flip_curve(noisy, m):
                counts = [len(noisy.flips[(AttackModel(m), p.hc, t)]) for t in range(4)]
                assert (p.min, p.max) == (min(counts), max(counts))
                assert p.mean == pytest.approx(sum(counts) / 4)
                assert p.min <= p.mean <= p.max

    def test_single_trial(self):
        r = run_sweep(plan(trials=1, profile=profile(noise=0.3)))
        for p in flip_curve(r, "DB"):
            assert p.min == p.mean == p.max

    def test_overlap_vc_equals_db(self):
        r = run_sweep(plan(profile=profile("OVERLAP", 1.0), models=("VC", "DB")))
        assert flip_curve(r, "VC") == flip_curve(r, "DB")


class TestPersistence:
    def test_buckets(self, reduced):
        pm = persistence_map(reduced, "DB")
        assert pm[(0, 0)] == 0 and pm.bucket((0, 0)) == 0
        full = [c for c, n in pm.persistence.items() if n == len(LEVELS)]
        assert full and all(pm.bucket(c) == 4 for c in full)
        assert len(BUCKET_COLORS) == 5

    def test_suffix_property(self, reduced):
        pm = persistence_map(reduced, "VC")
        for cell, n in pm.persistence.items():
            assert n == len(LEVELS) - pm.first_tier[cell]

    def test_recount(self, noisy):
        pm = persistence_map(noisy, "DB")
        for cell, n in pm.persistence.items():
            assert n == sum(cell in noisy.union("DB", h) for h in LEVELS)
        assert all(1 <= n <= len(LEVELS) for n in pm.persistence.values())

    def test_csv_rows(self, reduced):
        rows = persistence_map(reduced, "SG").rows()
        assert rows == sorted(rows)
        assert all(b == math.ceil(4 * n / len(LEVELS)) for _, _, n, b in rows)

    def test_needs_two_levels(self):
        r = run_sweep(plan(hc_levels=(100,)))
        with pytest.raises(ValueError):
            persistence_map(r, "DB")


class TestStability:
    def test_zero_without_noise(self, reduced):
        assert stability(reduced, "DB", LEVELS[-1]) == 0.0

    def test_recount(self, noisy):
        c = noisy.counts("DB", LEVELS[-1])
        assert stability(noisy, "DB", LEVELS[-1]) == (max(c) - min(c)) / (sum(c) / len(c))

    def test_undefined(self):
        r = run_sweep(plan(hc_levels=(0, 10)))
        with pytest.raises(UndefinedMetricError):
            stability(r, "DB", 0)
        assert stability_series(r, "DB") == [(0, None), (10, None)]

    def test_needs_two_trials(self):
        r = run_sweep(plan(trials=1))
        with pytest.raises(ValueError):
            stability(r, "DB", LEVELS[-1])


class TestCalibration:
    @pytest.mark.parametrize("name", sorted(CALIBRATION_TARGETS))
    def test_reproduces_builtin(self, name):
        rep = calibrate(CALIBRATION_TARGETS[name], name)
        assert rep.converged
        assert rep.profile == builtin_profiles()[name]

    def test_overlap_shortcut(self):
        rep = calibrate(CalibrationTarget(1.0, 2.0, 3000), w_diff=1.3)
        assert rep.profile.w_same == rep.profile.w_diff == 1.3
        assert rep.counts["VC"] == rep.counts["DB"]

    def test_inverted(self):
        rep = calibrate(CalibrationTarget(1.2, 3.0, 3000))
        assert rep.profile.w_same > rep.profile.w_diff
        assert rep.profile.behavior_class is BehaviorClass.INVERTED

    def test_reduced_ratios(self):
        rep = calibrate(CalibrationTarget(0.75, 5.0, 2000))
        assert 0.70 <= rep.ratios["VC/DB"] <= 0.80 and rep.ratios["VC/SG"] > 4

    @pytest.mark.parametrize("target", [CalibrationTarget(0.75, 5.0, 0), CalibrationTarget(0.5, 5.0, 10**6)])
    def test_unreachable(self, target):
        with pytest.raises(CalibrationError):
            calibrate(target)

    def test_non_convergence_reports_best(self):
        # A VC target of 2.5 cells cannot be met by a whole count.
        with pytest.raises(CalibrationError) as info:
            calibrate(CalibrationTarget(0.6, 1.25, 2))
        assert info.value.best.counts["VC"] in (2, 3)

    @given(st.floats(0.5, 0.95), st.floats(2.0, 6.0), st.integers(500, 3000))
    @settings(max_examples=15, deadline=None)
    def test_counts_hit_targets(self, vc_db, vc_sg, sg):
        try:
            rep = calibrate(CalibrationTarget(vc_db, vc_sg, sg))
        except CalibrationError:
            return
        want_sg, want_vc, want_db = CalibrationTarget(vc_db, vc_sg, sg).counts()
        assert rep.counts["SG"] == round(want_sg)
        assert rep.counts["VC"] == round(want_vc)
        assert rep.counts["DB"] == round(want_db)
