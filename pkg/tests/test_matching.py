import math

import pytest

from oracles import brute_force_match, welch_reference_p
from fleetwarn.core import AlarmSeries, EventRecord, FiringKind, MatchParams, NoTargetEventsError
from fleetwarn.matching import (
    MatchStats,
    classify_firings,
    gate_ttest,
    hard_filter,
    layout_periods,
    match_stats,
    significance_samples,
    significance_test,
    soft_filter,
    stats_to_jsonable,
)


def base_layout(window=5, horizon=0, delay=0):
    # one unit observed on [1, 30] with a single event spanning [20, 22)
    events = [EventRecord("u", 20, 22, "E1")]
    params = MatchParams(window=window, horizon=horizon, delay=delay)
    return layout_periods(events, params, {"u": (1, 30)})


class TestLayout:
    def test_base_regions(self):
        ul = base_layout().units["u"]
        assert ul.true_windows == ((15, 20, 0),)
        assert ul.irrelevant_zones == ((20, 22, 0),)
        assert ul.false_segments == ((1, 15), (22, 31))
        assert ul.window_events == (0,)

    def test_horizon_shifts_window_back(self):
        ul = base_layout(horizon=2).units["u"]
        assert ul.true_windows == ((13, 18, 0),)
        assert ul.irrelevant_zones == ((18, 22, 0),)
        assert ul.false_segments == ((1, 13), (22, 31))

    def test_delay_extends_zone(self):
        ul = base_layout(delay=3).units["u"]
        assert ul.irrelevant_zones == ((20, 25, 0),)
        assert ul.false_segments == ((1, 15), (25, 31))

    def test_window_clipped_at_range_start(self):
        layout = layout_periods(
            [EventRecord("u", 3, 4, "E")], MatchParams(window=5), {"u": (1, 30)}
        )
        ul = layout.units["u"]
        assert ul.true_windows == ((1, 3, 0),)
        assert ul.window_events == (0,)

    def test_window_fully_clipped_event_kept(self):
        # onset at the very first flight: no room for a window, zone remains
        layout = layout_periods(
            [EventRecord("u", 1, 3, "E")], MatchParams(window=5), {"u": (1, 30)}
        )
        ul = layout.units["u"]
        assert ul.true_windows == ()
        assert ul.window_events == ()
        assert ul.irrelevant_zones == ((1, 3, 0),)
        assert layout.dropped == ()

    def test_event_after_range_dropped(self):
        layout = layout_periods(
            [EventRecord("u", 20, 21, "E")], MatchParams(window=5), {"u": (1, 10)}
        )
        assert len(layout.dropped) == 1
        assert layout.units["u"].false_segments == ((1, 11),)

    def test_event_before_range_dropped(self):
        layout = layout_periods(
            [EventRecord("u", 4, 5, "E")], MatchParams(window=2), {"u": (10, 20)}
        )
        assert len(layout.dropped) == 1

    def test_event_on_unknown_unit_dropped(self):
        layout = layout_periods(
            [EventRecord("ghost", 5, 6, "E")], MatchParams(), {"u": (1, 10)}
        )
        assert layout.dropped == (EventRecord("ghost", 5, 6, "E"),)

    def test_regions_partition_range(self):
        import random

        rng = random.Random(77)
        for _ in range(50):
            first = rng.randint(0, 5)
            last = first + rng.randint(0, 40)
            events = []
            for i in range(rng.randint(0, 3)):
                onset = rng.randint(first - 5, last + 5)
                events.append(EventRecord("u", onset, onset + rng.randint(1, 4), f"E{i}"))
            params = MatchParams(
                window=rng.randint(1, 8),
                horizon=rng.randint(0, 3),
                delay=rng.randint(0, 3),
            )
            ul = layout_periods(events, params, {"u": (first, last)}).units["u"]
            counts = {t: 0 for t in range(first, last + 1)}
            for lo, hi, _ in ul.true_windows:
                for t in range(lo, hi):
                    counts[t] += 1
            seen_true = {t for t, c in counts.items() if c}
            seen_irr = set()
            for lo, hi, _ in ul.irrelevant_zones:
                seen_irr.update(range(lo, hi))
            seen_false = set()
            for lo, hi in ul.false_segments:
                seen_false.update(range(lo, hi))
            assert seen_false == set(range(first, last + 1)) - seen_true - seen_irr
            # false segments are maximal: no two adjacent
            for (a_lo, a_hi), (b_lo, b_hi) in zip(ul.false_segments, ul.false_segments[1:]):
                assert a_hi < b_lo

    def test_bad_range_raises(self):
        with pytest.raises(ValueError, match="bad observation range"):
            layout_periods([], MatchParams(), {"u": (5, 4)})


class TestClassify:
    def test_base_example_labels(self):
        layout = base_layout()
        alarm = AlarmSeries("a", {"u": frozenset({3, 16, 21, 27})})
        labels = {lab.flight: lab.kind for lab in classify_firings(alarm, layout)}
        assert labels == {
            3: FiringKind.FALSE,
            16: FiringKind.TRUE,
            21: FiringKind.IRRELEVANT,
            27: FiringKind.FALSE,
        }

    def test_true_beats_irrelevant(self):
        # flight 8 falls in event 1's window and event 0's zone
        events = [EventRecord("u", 7, 9, "A"), EventRecord("u", 12, 13, "B")]
        layout = layout_periods(events, MatchParams(window=5), {"u": (1, 30)})
        alarm = AlarmSeries("a", {"u": frozenset({8})})
        (lab,) = classify_firings(alarm, layout)
        assert lab.kind is FiringKind.TRUE
        assert lab.events == (1,)

    def test_shared_firing_credits_both_owners(self):
        events = [EventRecord("u", 10, 11, "A"), EventRecord("u", 12, 13, "B")]
        layout = layout_periods(events, MatchParams(window=5), {"u": (1, 30)})
        alarm = AlarmSeries("a", {"u": frozenset({8})})
        (lab,) = classify_firings(alarm, layout)
        assert lab.kind is FiringKind.TRUE
        assert lab.events == (0, 1)

    def test_false_firing_carries_segment_index(self):
        layout = base_layout()
        alarm = AlarmSeries("a", {"u": frozenset({3, 27})})
        labs = classify_firings(alarm, layout)
        assert [lab.segment for lab in labs] == [0, 1]

    def test_unknown_unit_rejected(self):
        layout = base_layout()
        alarm = AlarmSeries("a", {"ghost": frozenset({3})})
        with pytest.raises(ValueError, match="absent from layout"):
            classify_firings(alarm, layout)

    def test_out_of_range_flight_rejected(self):
        layout = base_layout()
        alarm = AlarmSeries("a", {"u": frozenset({31})})
        with pytest.raises(ValueError, match="outside range"):
            classify_firings(alarm, layout)

    def test_empty_alarm(self):
        assert classify_firings(AlarmSeries("a", {}), base_layout()) == []


class TestSignificance:
    def test_separated_constant_samples(self):
        assert significance_test([1, 1, 1, 1], [0, 0, 0, 0, 0, 0]) == 0.0

    def test_equal_constant_samples(self):
        assert significance_test([1, 1], [1, 1, 1]) == 1.0

    def test_small_samples_inconclusive(self):
        assert significance_test([1], [0, 0]) == 1.0
        assert significance_test([1, 2], [0]) == 1.0
        assert significance_test([], []) == 1.0

    def test_frozen_welch_value(self):
        p = significance_test([2, 1, 2, 1], [0, 1, 0, 0])
        assert p == pytest.approx(0.008733524902224501, rel=1e-12)

    def test_direction_is_one_sided(self):
        low, high = [0, 1, 0, 0], [2, 3, 2, 3]
        assert significance_test(high, low) < 0.01
        assert significance_test(low, high) > 0.9

    def test_matches_reference_on_random_samples(self):
        import random

        rng = random.Random(123)
        for _ in range(200):
            a = [rng.randint(0, 3) for _ in range(rng.randint(0, 6))]
            b = [rng.randint(0, 3) for _ in range(rng.randint(0, 6))]
            assert significance_test(a, b) == pytest.approx(
                welch_reference_p(a, b), rel=1e-9, abs=1e-12
            )

    def test_samples_from_layout(self):
        # two windows, one shared firing attributed to the earlier event only
        events = [EventRecord("u", 10, 11, "A"), EventRecord("u", 12, 13, "B")]
        layout = layout_periods(events, MatchParams(window=5), {"u": (1, 30)})
        alarm = AlarmSeries("a", {"u": frozenset({8, 20})})
        window_counts, segment_counts = significance_samples(alarm, layout)
        assert window_counts == [1, 0]
        assert sum(window_counts) == 1  # equals true firing total
        assert sum(segment_counts) == 1


class TestMatchStats:
    def test_base_example_counters(self):
        layout = base_layout()
        alarm = AlarmSeries("a", {"u": frozenset({3, 16, 21, 27})})
        st = match_stats(alarm, layout)
        assert st.window_events == 1
        assert st.false_segments == 2
        assert st.true_firings == 1
        assert st.false_firings == 2
        assert st.irrelevant_firings == 1
        assert st.covered_events == 1
        assert st.fired_false_segments == 2
        assert st.false_alarm_rate == 2.0
        assert st.coverage == 1.0
        assert st.false_to_covered == 2.0

    def test_silent_alarm(self):
        st = match_stats(AlarmSeries("a", {}), base_layout())
        assert st.coverage == 0.0
        assert st.false_alarm_rate == 0.0
        assert math.isinf(st.false_to_covered)
        assert st.p_value == 1.0

    def test_half_coverage(self):
        events = [EventRecord("u", 10, 11, "A"), EventRecord("u", 25, 26, "B")]
        layout = layout_periods(events, MatchParams(window=5), {"u": (1, 40)})
        alarm = AlarmSeries("a", {"u": frozenset({7})})
        st = match_stats(alarm, layout)
        assert st.covered_events == 1
        assert st.coverage == 0.5

    def test_no_events_strict(self):
        layout = layout_periods([], MatchParams(), {"u": (1, 10)})
        with pytest.raises(NoTargetEventsError, match="no target events"):
            match_stats(AlarmSeries("a", {}), layout)

    def test_no_events_lenient(self):
        layout = layout_periods([], MatchParams(), {"u": (1, 10)})
        st = match_stats(AlarmSeries("a", {"u": frozenset({5})}), layout, require_events=False)
        assert math.isnan(st.coverage)
        assert math.isnan(st.false_alarm_rate)
        assert math.isinf(st.false_to_covered)
        assert st.false_firings == 1

    def test_translation_invariance(self):
        shift = 1000
        events = [EventRecord("u", 20, 22, "E")]
        params = MatchParams(window=5)
        alarm = AlarmSeries("a", {"u": frozenset({3, 16, 21, 27})})
        st0 = match_stats(alarm, layout_periods(events, params, {"u": (1, 30)}))
        events_s = [EventRecord("u", 20 + shift, 22 + shift, "E")]
        alarm_s = AlarmSeries("a", {"u": frozenset({t + shift for t in (3, 16, 21, 27)})})
        st1 = match_stats(alarm_s, layout_periods(events_s, params, {"u": (1 + shift, 30 + shift)}))
        assert st0 == st1

    def test_wider_window_absorbs_false_firings(self):
        events = [EventRecord("u", 20, 21, "E")]
        alarm = AlarmSeries("a", {"u": frozenset({12, 18})})
        prev_false, prev_covered = None, None
        for w in (2, 4, 8, 10):
            st = match_stats(alarm, layout_periods(events, MatchParams(window=w), {"u": (1, 30)}))
            if prev_false is not None:
                assert st.false_firings <= prev_false
                assert st.covered_events >= prev_covered
            prev_false, prev_covered = st.false_firings, st.covered_events

    def test_fired_segments_iff_false_firings(self):
        import random

        rng = random.Random(99)
        for _ in range(100):
            events = [EventRecord("u", rng.randint(5, 25), rng.randint(26, 28), "E")]
            fires = frozenset(rng.sample(range(1, 31), rng.randint(0, 10)))
            layout = layout_periods(events, MatchParams(window=rng.randint(1, 6)), {"u": (1, 30)})
            st = match_stats(AlarmSeries("a", {"u": fires}), layout)
            assert (st.fired_false_segments == 0) == (st.false_firings == 0)

    def test_random_fleet_matches_brute_force(self):
        import random

        rng = random.Random(31337)
        for _ in range(250):
            n_units = rng.randint(1, 3)
            ranges = {}
            firings = {}
            events = []
            records = []
            for u in range(n_units):
                unit = f"u{u}"
                first = rng.randint(0, 4)
                last = first + rng.randint(3, 45)
                ranges[unit] = (first, last)
                for k in range(rng.randint(0, 3)):
                    onset = rng.randint(first - 6, last + 6)
                    end = onset + rng.randint(1, 4)
                    events.append((unit, onset, end))
                    records.append(EventRecord(unit, onset, end, f"E{k}"))
                firings[unit] = set(
                    rng.sample(range(first, last + 1), rng.randint(0, min(12, last - first + 1)))
                )
            params = MatchParams(
                window=rng.randint(1, 9),
                horizon=rng.randint(0, 3),
                delay=rng.randint(0, 3),
            )
            layout = layout_periods(records, params, ranges)
            if layout.total_window_events() == 0:
                continue
            alarm = AlarmSeries("a", {u: frozenset(v) for u, v in firings.items()})
            st = match_stats(alarm, layout)
            ref = brute_force_match(events, params, ranges, firings)
            for key in (
                "window_events",
                "false_segments",
                "true_firings",
                "false_firings",
                "irrelevant_firings",
                "covered_events",
                "fired_false_segments",
            ):
                assert getattr(st, key) == ref[key], key
            assert st.false_alarm_rate == pytest.approx(ref["false_alarm_rate"])
            assert st.coverage == pytest.approx(ref["coverage"])
            if math.isinf(ref["false_to_covered"]):
                assert math.isinf(st.false_to_covered)
            else:
                assert st.false_to_covered == pytest.approx(ref["false_to_covered"])
            window_counts, segment_counts = significance_samples(alarm, layout)
            assert window_counts == ref["window_counts"]
            assert segment_counts == ref["segment_counts"]
            assert st.p_value == pytest.approx(
                welch_reference_p(ref["window_counts"], ref["segment_counts"]),
                rel=1e-9,
                abs=1e-12,
            )


def make_stats(**kw):
    base = dict(
        window_events=4,
        false_segments=5,
        true_firings=3,
        false_firings=0,
        irrelevant_firings=0,
        covered_events=3,
        fired_false_segments=0,
        false_alarm_rate=0.0,
        coverage=0.75,
        false_to_covered=0.0,
        p_value=0.001,
    )
    base.update(kw)
    return MatchStats(**base)


class TestFilters:
    def test_gate_needs_repeat_coverage(self):
        assert not gate_ttest(make_stats(covered_events=1), alpha=0.05)
        assert gate_ttest(make_stats(covered_events=2), alpha=0.05)

    def test_gate_needs_significance(self):
        assert not gate_ttest(make_stats(p_value=0.05), alpha=0.05)
        assert gate_ttest(make_stats(p_value=0.049), alpha=0.05)

    def test_hard_filter(self):
        assert hard_filter(make_stats(covered_events=2), theta=2)
        assert not hard_filter(make_stats(covered_events=1), theta=2)
        assert not hard_filter(make_stats(fired_false_segments=1), theta=2)

    def test_soft_filter(self):
        assert soft_filter(make_stats(false_to_covered=1.9), theta=2.0)
        assert soft_filter(make_stats(false_to_covered=2.0), theta=2.0)
        assert not soft_filter(make_stats(false_to_covered=2.1), theta=2.0)

    def test_soft_filter_rejects_uncovered(self):
        st = make_stats(covered_events=0, false_to_covered=float("inf"))
        assert not soft_filter(st, theta=1e12)


class TestJsonable:
    def test_plain_numbers_pass_through(self):
        d = stats_to_jsonable(make_stats())
        assert d["covered_events"] == 3
        assert d["coverage"] == 0.75

    def test_inf_and_nan_encoded(self):
        st = make_stats(
            false_to_covered=float("inf"),
            coverage=float("nan"),
            false_alarm_rate=float("nan"),
        )
        d = stats_to_jsonable(st)
        assert d["false_to_covered"] == "inf"
        assert d["coverage"] is None
        assert d["false_alarm_rate"] is None
