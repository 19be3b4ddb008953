"""Behavioural event logs: parsing, state pairing and ethogram lookup.

Event logs are the delimited exports of an annotation tool with one row per
state start/stop.  Times are kept as integer tenths of a second so that the
0.1 s annotation resolution survives arithmetic without drift.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from importlib import resources
from pathlib import Path
from typing import IO, Iterable, Sequence

from .errors import ClassificationError, PairingError, RowError, SchemaError

log = logging.getLogger(__name__)

EVENT_COLUMNS = ("Subject", "Behaviour", "Modifier", "Event_Type", "Time_Relative_sf", "Duration")
_MISSING = {"", "-"}


class EventType(str, enum.Enum):
    START = "State start"
    STOP = "State stop"


class Category(str, enum.Enum):
    LOCOMOTOR = "Locomotor"
    SOCIAL = "Social"
    OBJECT = "Object"
    STRAW = "Straw"
    NON_PLAY = "NonPlayState"


PLAY_CATEGORIES = (Category.LOCOMOTOR, Category.SOCIAL, Category.OBJECT, Category.STRAW)


@dataclass(frozen=True)
class Dialect:
    delimiter: str = ","
    quotechar: str = '"'


@dataclass(frozen=True)
class EventRecord:
    subject: str
    behaviour: str
    modifier: str | None
    event_type: EventType
    time_ds: int  # tenths of a second from video start
    duration: float | None = None

    @property
    def time_relative(self) -> float:
        return self.time_ds / 10


@dataclass(frozen=True)
class BehaviourInterval:
    subject: str
    behaviour: str
    category: Category
    start_ds: int
    stop_ds: int
    modifier: str | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.stop_ds <= self.start_ds:
            raise ValueError(f"interval for {self.subject}/{self.behaviour} has stop <= start")

    @property
    def start_s(self) -> float:
        return self.start_ds / 10

    @property
    def stop_s(self) -> float:
        return self.stop_ds / 10

    @property
    def duration_s(self) -> float:
        return self.stop_s - self.start_s

    @property
    def is_play(self) -> bool:
        return self.category is not Category.NON_PLAY


def normalize_code(code: str) -> str:
    """Lookup key for a behaviour code: case-, space- and punctuation-insensitive."""
    return re.sub(r"[^0-9a-z]", "", code.lower())


@dataclass(frozen=True)
class EthogramEntry:
    code: str
    category: Category
    play: bool


@dataclass
class EthogramTable:
    """Closed mapping from behaviour code to category and play flag."""

    entries: dict[str, EthogramEntry] = field(default_factory=dict)

    def add(self, code: str, category: Category | str, play: bool) -> None:
        key = normalize_code(code)
        if not key:
            raise ValueError("empty behaviour code")
        entry = EthogramEntry(code.strip(), Category(category), bool(play))
        existing = self.entries.get(key)
        if existing is not None and existing != entry:
            raise ValueError(f"behaviour code {code!r} mapped twice")
        self.entries[key] = entry

    def lookup(self, code: str) -> EthogramEntry:
        try:
            return self.entries[normalize_code(code)]
        except KeyError:
            raise ClassificationError(f"unknown behaviour code {code!r}") from None

    def __contains__(self, code: str) -> bool:
        return normalize_code(code) in self.entries

    def __iter__(self):
        return iter(self.entries.values())

    def __len__(self) -> int:
        return len(self.entries)


def load_ethogram(path: str | Path | None = None, dialect: Dialect | None = None) -> EthogramTable:
    """Read an ethogram table (columns ``code, category, play_flag``).

    Without a path, the bundled table of play and non-play states is used.
    """
    dialect = dialect or Dialect()
    if path is None:
        text = resources.files("calfplay.data").joinpath("ethogram.csv").read_text(encoding="utf-8")
        name = "ethogram.csv"
    else:
        text = Path(path).read_text(encoding="utf-8")
        name = str(path)
    reader = csv.DictReader(io.StringIO(text), delimiter=dialect.delimiter, quotechar=dialect.quotechar)
    columns = {c.strip().lower(): c for c in reader.fieldnames or ()}
    for required in ("code", "category", "play_flag"):
        if required not in columns:
            raise SchemaError(required, name)
    table = EthogramTable()
    for row in reader:
        raw_flag = row[columns["play_flag"]].strip().lower()
        if raw_flag not in {"0", "1", "true", "false", "yes", "no"}:
            raise RowError(f"bad play_flag {raw_flag!r}", name, reader.line_num)
        try:
            table.add(row[columns["code"]], row[columns["category"]].strip(), raw_flag in {"1", "true", "yes"})
        except ValueError as exc:
            raise RowError(str(exc), name, reader.line_num) from None
    return table


def classify_behaviour(code: str, table: EthogramTable) -> tuple[Category, bool]:
    """Return ``(category, is_play)``; unknown codes raise, never default."""
    entry = table.lookup(code)
    return entry.category, entry.play


def _parse_event_type(text: str) -> EventType:
    key = re.sub(r"[^a-z]", "", text.lower())
    if key == "statestart":
        return EventType.START
    if key == "statestop":
        return EventType.STOP
    raise ValueError(f"unknown event type {text!r}")


def _parse_tenths(text: str) -> int:
    value = Decimal(text.strip())
    if not value.is_finite():
        raise InvalidOperation
    return int((value * 10).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def _format_tenths(ds: int) -> str:
    sign = "-" if ds < 0 else ""
    whole, frac = divmod(abs(ds), 10)
    return f"{sign}{whole}.{frac}"


def parse_event_log(
    source: IO[str] | str | Path,
    dialect: Dialect | None = None,
    source_name: str | None = None,
) -> list[EventRecord]:
    """Parse an exported event log into records, one per data row.

    Column order is free; names match case-insensitively.
    """
    dialect = dialect or Dialect()
    if isinstance(source, (str, Path)):
        source_name = source_name or str(source)
        with open(source, newline="", encoding="utf-8-sig") as fh:
            return parse_event_log(fh, dialect, source_name)
    name = source_name or getattr(source, "name", "<stream>")
    reader = csv.reader(source, delimiter=dialect.delimiter, quotechar=dialect.quotechar)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(EVENT_COLUMNS[0], name) from None
    index = {h.strip().lstrip("﻿").lower(): i for i, h in enumerate(header)}
    cols = {}
    for column in EVENT_COLUMNS:
        if column.lower() not in index:
            raise SchemaError(column, name)
        cols[column] = index[column.lower()]

    records = []
    for row in reader:
        if not any(cell.strip() for cell in row):
            continue
        line = reader.line_num
        if len(row) < len(header):
            raise RowError(f"expected {len(header)} fields, got {len(row)}", name, line)
        subject = row[cols["Subject"]].strip()
        behaviour = row[cols["Behaviour"]].strip()
        if not subject or not behaviour:
            raise RowError("empty subject or behaviour", name, line)
        modifier = row[cols["Modifier"]].strip()
        try:
            event_type = _parse_event_type(row[cols["Event_Type"]])
        except ValueError as exc:
            raise RowError(str(exc), name, line) from None
        try:
            time_ds = _parse_tenths(row[cols["Time_Relative_sf"]])
        except (InvalidOperation, ValueError):
            raise RowError(f"unparseable time {row[cols['Time_Relative_sf']]!r}", name, line) from None
        if time_ds < 0:
            raise RowError("negative time", name, line)
        raw_duration = row[cols["Duration"]].strip()
        duration = None
        if raw_duration not in _MISSING:
            try:
                duration = float(raw_duration)
            except ValueError:
                raise RowError(f"unparseable duration {raw_duration!r}", name, line) from None
        records.append(
            EventRecord(
                subject=subject,
                behaviour=behaviour,
                modifier=None if modifier in _MISSING else modifier,
                event_type=event_type,
                time_ds=time_ds,
                duration=duration,
            )
        )
    return records


def write_event_log(records: Iterable[EventRecord], stream: IO[str], dialect: Dialect | None = None) -> None:
    dialect = dialect or Dialect()
    writer = csv.writer(stream, delimiter=dialect.delimiter, quotechar=dialect.quotechar, lineterminator="\n")
    writer.writerow(EVENT_COLUMNS)
    for r in records:
        writer.writerow(
            [
                r.subject,
                r.behaviour,
                r.modifier or "",
                r.event_type.value,
                _format_tenths(r.time_ds),
                "" if r.duration is None else repr(r.duration),
            ]
        )


def _event_sort_key(event: EventRecord) -> tuple:
    # stops before starts at equal times so back-to-back bouts pair correctly
    return (event.time_ds, 0 if event.event_type is EventType.STOP else 1, normalize_code(event.behaviour))


def pair_state_events(
    events: Sequence[EventRecord],
    table: EthogramTable | None = None,
    duration_tolerance: float = 0.05,
) -> list[BehaviourInterval]:
    """Pair StateStart/StateStop events into behaviour intervals.

    Each start is closed by the next stop of the same subject and behaviour.
    A second start while a state is open closes the open interval at the new
    start (flag ``reentrant``).  Starts still open at the end of the stream
    are closed at the last observed timestamp (flag ``dangling``).
    """
    table = table or load_ethogram()
    if not events:
        return []
    stream_end = max(e.time_ds for e in events)
    by_subject: dict[str, list[EventRecord]] = defaultdict(list)
    for e in events:
        by_subject[e.subject].append(e)

    intervals = []
    for subject, subject_events in by_subject.items():
        open_states: dict[str, EventRecord] = {}
        flags_for: dict[str, list[str]] = {}
        for e in sorted(subject_events, key=_event_sort_key):
            key = normalize_code(e.behaviour)
            entry = table.lookup(e.behaviour)
            if e.event_type is EventType.START:
                if key in open_states:
                    prev = open_states.pop(key)
                    log.warning(
                        "%s/%s restarted at %.1f s while open since %.1f s; closing previous bout",
                        subject, e.behaviour, e.time_relative, prev.time_relative,
                    )
                    _emit(intervals, prev, e.time_ds, entry, flags_for.pop(key) + ["reentrant"])
                open_states[key] = e
                flags_for[key] = []
                continue
            start = open_states.pop(key, None)
            if start is None:
                raise PairingError(
                    f"StateStop without open StateStart: subject={subject!r} "
                    f"behaviour={e.behaviour!r} time={e.time_relative:.1f}"
                )
            flags = flags_for.pop(key)
            if e.duration is not None and abs(e.duration - (e.time_ds - start.time_ds) / 10) > duration_tolerance:
                log.warning(
                    "%s/%s at %.1f s: logged duration %.3f disagrees with stop-start",
                    subject, e.behaviour, e.time_relative, e.duration,
                )
                flags.append("duration_mismatch")
            _emit(intervals, start, e.time_ds, entry, flags)
        for key, start in open_states.items():
            entry = table.lookup(start.behaviour)
            log.warning(
                "%s/%s open at end of log; closing at %.1f s", subject, start.behaviour, stream_end / 10
            )
            _emit(intervals, start, stream_end, entry, flags_for[key] + ["dangling"])
    intervals.sort(key=lambda iv: (iv.subject, iv.start_ds, normalize_code(iv.behaviour), iv.stop_ds))
    return intervals


def _emit(out: list, start: EventRecord, stop_ds: int, entry: EthogramEntry, flags: list[str]) -> None:
    if stop_ds <= start.time_ds:
        log.warning(
            "dropping zero-length bout %s/%s at %.1f s", start.subject, start.behaviour, start.time_relative
        )
        return
    out.append(
        BehaviourInterval(
            subject=start.subject,
            behaviour=entry.code,
            category=entry.category,
            start_ds=start.time_ds,
            stop_ds=stop_ds,
            modifier=start.modifier,
            flags=tuple(flags),
        )
    )
