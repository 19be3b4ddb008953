"""Welfare statistics: %OP, event rates, space categories, descriptive summaries."""

from __future__ import annotations

import csv
import enum
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Sequence

from .errors import RowError, SchemaError
from .ethogram import PLAY_CATEGORIES, BehaviourInterval, Category, normalize_code

OBSERVATION_SECONDS = 61_200  # 06:00-23:00


class SpaceCategory(str, enum.Enum):
    LT4 = "<4"
    S4_6 = "4-6"
    S6_8 = "6-8"
    S8_10 = "8-10"
    S10_12 = "10-12"
    S12_14 = "12-14"
    S14_16 = "14-16"
    S16_18 = "16-18"


_SPACE_ORDER = list(SpaceCategory)


def categorize_space(space_m2: float) -> SpaceCategory:
    """2 m² bins, left-closed: 8.0 falls in 8-10.  Valid range is (0, 18]."""
    if not (0 < space_m2 <= 18):
        raise ValueError(f"space allowance {space_m2} m² outside (0, 18]")
    if space_m2 < 4:
        return SpaceCategory.LT4
    return _SPACE_ORDER[min(int((space_m2 - 4) // 2) + 1, len(_SPACE_ORDER) - 1)]


@dataclass(frozen=True)
class CalfRecord:
    calf_id: str
    farm_id: str
    age_days: int
    health_category: int
    space_m2: float
    group_size: int
    milk_l_day: float
    bedding_score: int
    body_weight_kg: float | None = None

    def __post_init__(self) -> None:
        if self.space_m2 <= 0:
            raise ValueError("space_m2 must be positive")
        if self.health_category not in (1, 2, 3):
            raise ValueError(f"health_category {self.health_category} not in {{1, 2, 3}}")
        if self.bedding_score not in (1, 2, 3):
            raise ValueError(f"bedding_score {self.bedding_score} not in {{1, 2, 3}}")
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2")
        if self.milk_l_day < 0:
            raise ValueError("milk_l_day must be non-negative")

    @property
    def space_category(self) -> SpaceCategory:
        return categorize_space(self.space_m2)


CALF_COLUMNS = ("calf_id", "farm_id", "age_days", "health_category", "space_m2",
                "group_size", "milk_l_day", "bedding_score")


def read_calf_records(source: IO[str] | str | Path, source_name: str | None = None) -> list[CalfRecord]:
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8-sig") as fh:
            return read_calf_records(fh, source_name or str(source))
    name = source_name or "<stream>"
    reader = csv.DictReader(source)
    for column in CALF_COLUMNS:
        if column not in (reader.fieldnames or ()):
            raise SchemaError(column, name)
    out = []
    for row in reader:
        try:
            weight = row.get("body_weight_kg")
            out.append(CalfRecord(
                calf_id=row["calf_id"].strip(),
                farm_id=row["farm_id"].strip(),
                age_days=int(row["age_days"]),
                health_category=int(row["health_category"]),
                space_m2=float(row["space_m2"]),
                group_size=int(row["group_size"]),
                milk_l_day=float(row["milk_l_day"]),
                bedding_score=int(row["bedding_score"]),
                body_weight_kg=float(weight) if weight not in (None, "") else None,
            ))
        except ValueError as exc:
            raise RowError(str(exc), name, reader.line_num) from None
    return out


def _union_seconds(spans: Iterable[tuple[int, int]]) -> int:
    """Total length (tenths of a second) of a union of half-open spans."""
    total, cur_start, cur_stop = 0, None, None
    for start, stop in sorted(spans):
        if cur_stop is None or start > cur_stop:
            if cur_stop is not None:
                total += cur_stop - cur_start
            cur_start, cur_stop = start, stop
        else:
            cur_stop = max(cur_stop, stop)
    if cur_stop is not None:
        total += cur_stop - cur_start
    return total


@dataclass
class PlaySummary:
    observation_seconds: float
    play_seconds: float
    percent_op_total: float
    percent_op_by_category: dict[str, float]
    events_per_hour_total: float = 0.0
    events_per_hour_by_category: dict[str, float] = field(default_factory=dict)
    events_per_hour_by_behaviour: dict[str, float] = field(default_factory=dict)


def percent_op(intervals: Sequence[BehaviourInterval], observation_seconds: float = OBSERVATION_SECONDS) -> PlaySummary:
    """Play time as a percentage of the observation period.

    Non-play intervals are ignored.  The total uses the union of play time so
    simultaneous behaviours are not counted twice; each category likewise
    uses the union of its own bouts, so categories can overlap each other.
    """
    if observation_seconds <= 0:
        raise ValueError("observation period must be positive")
    play = [iv for iv in intervals if iv.is_play]
    total_ds = _union_seconds((iv.start_ds, iv.stop_ds) for iv in play)
    by_category = {}
    for cat in PLAY_CATEGORIES:
        ds = _union_seconds((iv.start_ds, iv.stop_ds) for iv in play if iv.category is cat)
        by_category[cat.value] = ds / 10 / observation_seconds * 100
    return PlaySummary(
        observation_seconds=observation_seconds,
        play_seconds=total_ds / 10,
        percent_op_total=total_ds / 10 / observation_seconds * 100,
        percent_op_by_category=by_category,
    )


def percent_to_seconds(percent: float, observation_seconds: float = OBSERVATION_SECONDS) -> float:
    return percent / 100 * observation_seconds


def events_per_hour(intervals: Sequence[BehaviourInterval], observation_seconds: float = OBSERVATION_SECONDS) -> tuple[float, dict[str, float], dict[str, float]]:
    """Play bouts per observed hour: ``(total, by_category, by_behaviour)``."""
    if observation_seconds <= 0:
        raise ValueError("observation period must be positive")
    hours = observation_seconds / 3600
    play = [iv for iv in intervals if iv.is_play]
    by_cat = Counter(iv.category.value for iv in play)
    by_beh = Counter(iv.behaviour for iv in play)
    return (
        len(play) / hours,
        {c.value: by_cat.get(c.value, 0) / hours for c in PLAY_CATEGORIES},
        {b: n / hours for b, n in sorted(by_beh.items())},
    )


def observation_seconds(
    intervals: Sequence[BehaviourInterval],
    base_seconds: float = OBSERVATION_SECONDS,
    deduct: Iterable[str] = ("Management", "Out of view"),
) -> float:
    """Observation period minus the union of the deducted states' time."""
    keys = {normalize_code(d) for d in deduct}
    lost = _union_seconds((iv.start_ds, iv.stop_ds) for iv in intervals if normalize_code(iv.behaviour) in keys)
    remaining = base_seconds - lost / 10
    if remaining <= 0:
        raise ValueError("no observation time left after deductions")
    return remaining


def summarize_play(
    intervals: Sequence[BehaviourInterval],
    observation: float = OBSERVATION_SECONDS,
) -> PlaySummary:
    summary = percent_op(intervals, observation)
    total, by_cat, by_beh = events_per_hour(intervals, observation)
    summary.events_per_hour_total = total
    summary.events_per_hour_by_category = by_cat
    summary.events_per_hour_by_behaviour = by_beh
    return summary


def summarize_by_subject(
    intervals: Sequence[BehaviourInterval],
    base_seconds: float = OBSERVATION_SECONDS,
    deduct: Iterable[str] | None = None,
) -> dict[str, PlaySummary]:
    grouped: dict[str, list[BehaviourInterval]] = defaultdict(list)
    for iv in intervals:
        grouped[iv.subject].append(iv)
    out = {}
    for subject in sorted(grouped):
        ivs = grouped[subject]
        obs = base_seconds if deduct is None else observation_seconds(ivs, base_seconds, deduct)
        out[subject] = summarize_play(ivs, obs)
    return out


SUMMARY_COLUMNS = (
    ["farm_id", "calf_id", "observation_s", "play_s", "percent_op_total"]
    + [f"percent_op_{c.value.lower()}" for c in PLAY_CATEGORIES]
    + ["events_per_hour_total"]
    + [f"events_per_hour_{c.value.lower()}" for c in PLAY_CATEGORIES]
)


def write_summary_table(rows: Iterable[tuple[str, str, PlaySummary]], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for farm, calf, s in rows:
        writer.writerow(
            [farm, calf, repr(float(s.observation_seconds)), repr(float(s.play_seconds)), repr(s.percent_op_total)]
            + [repr(s.percent_op_by_category[c.value]) for c in PLAY_CATEGORIES]
            + [repr(s.events_per_hour_total)]
            + [repr(s.events_per_hour_by_category[c.value]) for c in PLAY_CATEGORIES]
        )


@dataclass(frozen=True)
class Descriptive:
    n: int
    min: float
    max: float
    mean: float
    sd: float | None


def descriptive_stats(values: Sequence[float]) -> Descriptive:
    """Min, max, mean and sample SD (n-1 denominator; None when n == 1)."""
    xs = [float(v) for v in values]
    if not xs:
        raise ValueError("descriptive_stats of empty data")
    n = len(xs)
    mean = math.fsum(xs) / n
    sd = None
    if n > 1:
        sd = math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / (n - 1))
    return Descriptive(n=n, min=min(xs), max=max(xs), mean=mean, sd=sd)
