from __future__ import annotations

import io
import math
import statistics

import pytest
from hypothesis import given
from hypothesis import strategies as st

from calfplay.ethogram import BehaviourInterval, Category
from calfplay.metrics import (OBSERVATION_SECONDS, CalfRecord, SpaceCategory, categorize_space, descriptive_stats,
                              events_per_hour, observation_seconds, percent_op, percent_to_seconds,
                              read_calf_records, summarize_by_subject, summarize_play, write_summary_table)

# 64 integer ages built offline so that min/max/mean/sd round to 2, 114, 53.28, 25.88
AGE_FIXTURE = [2, 2, 3, 3, 5, 9, 17, 19, 21, 24, 24, 27, 36, 36, 37, 38, 38, 41, 42, 44, 46, 46, 47, 48, 49,
               50, 50, 51, 52, 52, 53, 53, 53, 54, 55, 59, 59, 61, 62, 63, 64, 64, 65, 66, 66, 67, 67, 70,
               70, 72, 73, 74, 74, 77, 78, 78, 80, 82, 87, 91, 94, 98, 108, 114]


def iv(behaviour, category, a_ds, b_ds, subject="Calf1"):
    return BehaviourInterval(subject, behaviour, category, a_ds, b_ds)


def test_one_percent_is_about_ten_minutes():
    s = percent_op([iv("Run", Category.LOCOMOTOR, 0, 6120)])
    assert s.percent_op_total == pytest.approx(1.0, abs=1e-12)
    assert percent_to_seconds(1.0) / 60 == pytest.approx(10.2)


def test_percent_conversions():
    s = percent_op([iv("Run", Category.LOCOMOTOR, 0, 19156)])
    assert round(s.percent_op_total, 2) == 3.13
    assert round(s.play_seconds / 60, 1) == 31.9
    assert round(percent_op([iv("Run", Category.LOCOMOTOR, 0, 490)]).percent_op_total, 2) == 0.08
    assert abs(percent_to_seconds(3.13) / 60 - 31.9) <= 0.05
    assert abs(percent_to_seconds(0.08) - 49) <= 1


def test_zero_play_and_non_play_ignored():
    assert percent_op([]).percent_op_total == 0.0
    assert percent_op([iv("Milk feeding", Category.NON_PLAY, 0, 100)]).percent_op_total == 0.0


def test_zero_observation_is_error():
    with pytest.raises(ValueError):
        percent_op([], 0)
    with pytest.raises(ValueError):
        events_per_hour([], 0)


def test_total_equals_sum_of_categories_without_overlap():
    ivs = [iv("Run", Category.LOCOMOTOR, 0, 100), iv("Straw dig", Category.STRAW, 200, 350),
           iv("Chase", Category.SOCIAL, 400, 401)]
    s = percent_op(ivs)
    assert s.percent_op_total == pytest.approx(sum(s.percent_op_by_category.values()), rel=1e-9)


def test_total_uses_union_when_categories_overlap():
    s = percent_op([iv("Run", Category.LOCOMOTOR, 0, 100), iv("Frontal push", Category.SOCIAL, 50, 150)])
    assert s.play_seconds == 15.0
    assert sum(s.percent_op_by_category.values()) > s.percent_op_total


play_intervals = st.lists(
    st.tuples(st.sampled_from([("Run", Category.LOCOMOTOR), ("Chase", Category.SOCIAL),
                               ("Straw toss", Category.STRAW), ("Brush interaction", Category.OBJECT)]),
              st.integers(0, 5000), st.integers(1, 500)),
    max_size=20,
).map(lambda rows: [iv(b, c, a, a + d) for (b, c), a, d in rows])


@given(play_intervals, st.integers(0, 10**6))
def test_percent_op_invariant_under_splitting(ivs, cut_seed):
    if not ivs:
        return
    k = cut_seed % len(ivs)
    target = ivs[k]
    if target.stop_ds - target.start_ds < 2:
        return
    mid = target.start_ds + 1 + cut_seed % (target.stop_ds - target.start_ds - 1)
    split = ivs[:k] + [iv(target.behaviour, target.category, target.start_ds, mid),
                       iv(target.behaviour, target.category, mid, target.stop_ds)] + ivs[k + 1:]
    a, b = percent_op(ivs), percent_op(split)
    assert a.percent_op_total == b.percent_op_total
    assert a.percent_op_by_category == b.percent_op_by_category


@given(play_intervals)
def test_percent_op_scale_invariant(ivs):
    doubled = [iv(i.behaviour, i.category, 2 * i.start_ds, 2 * i.stop_ds) for i in ivs]
    assert percent_op(doubled, 2 * OBSERVATION_SECONDS).percent_op_total == pytest.approx(
        percent_op(ivs).percent_op_total, rel=1e-12)


def test_events_per_hour_examples():
    ivs = [iv("Run", Category.LOCOMOTOR, 10 * k, 10 * k + 5) for k in range(17)]
    total, by_cat, by_beh = events_per_hour(ivs)
    assert total == pytest.approx(1.0)
    ivs = [iv("Run", Category.LOCOMOTOR, k, k + 1) for k in range(100)] + \
          [iv("Straw dig", Category.STRAW, k, k + 1) for k in range(14)]
    total, by_cat, by_beh = events_per_hour(ivs)
    assert round(total, 2) == 6.71
    assert sum(by_cat.values()) == pytest.approx(total)
    assert set(by_beh) == {"Run", "Straw dig"}


@pytest.mark.parametrize("space,expected", [
    (2.66, SpaceCategory.LT4), (3.999, SpaceCategory.LT4), (4.0, SpaceCategory.S4_6),
    (8.0, SpaceCategory.S8_10), (14.5, SpaceCategory.S14_16), (17.98, SpaceCategory.S16_18),
    (18.0, SpaceCategory.S16_18),
])
def test_categorize_space(space, expected):
    assert categorize_space(space) is expected


@pytest.mark.parametrize("bad", [0, -1, 18.01])
def test_categorize_space_range(bad):
    with pytest.raises(ValueError):
        categorize_space(bad)


@given(st.floats(min_value=1e-6, max_value=18), st.floats(min_value=1e-6, max_value=18))
def test_categorize_space_monotone(a, b):
    order = list(SpaceCategory)
    lo, hi = min(a, b), max(a, b)
    assert order.index(categorize_space(lo)) <= order.index(categorize_space(hi))


def test_descriptive_examples():
    d = descriptive_stats([2, 2, 2])
    assert (d.min, d.max, d.mean, d.sd) == (2, 2, 2, 0)
    d = descriptive_stats([1, 2, 3])
    assert (d.mean, d.sd) == (2, 1)
    assert descriptive_stats([5]).sd is None
    with pytest.raises(ValueError):
        descriptive_stats([])


def test_age_fixture_summary():
    d = descriptive_stats(AGE_FIXTURE)
    assert (d.n, d.min, d.max) == (64, 2, 114)
    assert round(d.mean, 2) == 53.28 and round(d.sd, 2) == 25.88
    assert d.mean == pytest.approx(statistics.mean(AGE_FIXTURE), rel=1e-15)
    assert d.sd == pytest.approx(statistics.stdev(AGE_FIXTURE), rel=1e-12)


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False), min_size=2, max_size=200))
def test_descriptive_one_pass_vs_two_pass(xs):
    d = descriptive_stats(xs)
    # Welford single pass
    n, mean, m2 = 0, 0.0, 0.0
    for x in xs:
        n += 1
        delta = x - mean
        mean += delta / n
        m2 += delta * (x - mean)
    sd = math.sqrt(max(m2, 0.0) / (n - 1))
    scale = max(1.0, max(abs(x) for x in xs))
    assert abs(d.mean - mean) <= 1e-12 * scale
    assert abs(d.sd - sd) <= 1e-9 * scale


def test_observation_deductions():
    ivs = [iv("Management", Category.NON_PLAY, 0, 600), iv("Out of view", Category.NON_PLAY, 300, 900),
           iv("Run", Category.LOCOMOTOR, 1000, 1100)]
    assert observation_seconds(ivs, 1000) == 910
    s = summarize_by_subject(ivs, 1000, deduct=("Management", "Out of view"))["Calf1"]
    assert s.observation_seconds == 910 and s.percent_op_total == pytest.approx(10 / 910 * 100)


def test_calf_record_validation_and_reader():
    with pytest.raises(ValueError):
        CalfRecord("c", "f", 30, 4, 5.0, 8, 8.0, 2)
    text = ("calf_id,farm_id,age_days,health_category,space_m2,group_size,milk_l_day,bedding_score\n"
            "Calf1,FarmA,30,1,2.66,8,8.0,2\n")
    (rec,) = read_calf_records(io.StringIO(text))
    assert rec.space_category is SpaceCategory.LT4


def test_summary_table_columns():
    s = summarize_play([iv("Run", Category.LOCOMOTOR, 0, 6120)])
    buf = io.StringIO()
    write_summary_table([("FarmA", "Calf1", s)], buf)
    header, row = buf.getvalue().splitlines()
    assert header.startswith("farm_id,calf_id,observation_s,play_s,percent_op_total")
    assert row.split(",")[4] == repr(s.percent_op_total)
