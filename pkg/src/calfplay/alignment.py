"""Join behaviour intervals to tracked frames and resolve one label per frame."""

from __future__ import annotations

import bisect
import csv
import enum
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

from .errors import RowError, SchemaError
from .ethogram import BehaviourInterval, Category, EthogramTable, load_ethogram, normalize_code
from .timing import annotation_to_absolute

log = logging.getLogger(__name__)

_EPOCH = datetime(1970, 1, 1)


def to_ms(ts: datetime) -> int:
    return (ts - _EPOCH) // timedelta(milliseconds=1)


def from_ms(ms: int) -> datetime:
    return _EPOCH + timedelta(milliseconds=ms)


@dataclass(frozen=True)
class FrameMeta:
    timestamp: datetime
    tracking_id: int
    bbox: tuple[float, float, float, float]  # x, y, w, h in pixels
    confidence: float
    mean_intensity: float
    occlusion_fraction: float
    crop_path: str
    embedding_path: str
    mask_area: float | None = None
    frame_index: int | None = None

    def __post_init__(self) -> None:
        _, _, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValueError(f"bbox must have positive size, got {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if not 0.0 <= self.mean_intensity <= 255.0:
            raise ValueError(f"mean_intensity {self.mean_intensity} outside [0, 255]")
        if not 0.0 <= self.occlusion_fraction <= 1.0:
            raise ValueError(f"occlusion_fraction {self.occlusion_fraction} outside [0, 1]")

    @property
    def bbox_area(self) -> float:
        return self.bbox[2] * self.bbox[3]


class FinalLabel(enum.IntEnum):
    """Training label; larger value wins when states co-occur."""

    NOT_PLAYING = 0
    OUT_OF_VIEW = 1
    NON_ACTIVE_PLAYING = 2
    ACTIVE_PLAYING = 3
    MANAGEMENT = 4

    @property
    def text(self) -> str:
        return _LABEL_TEXT[self]

    @classmethod
    def from_text(cls, text: str) -> "FinalLabel":
        for label, name in _LABEL_TEXT.items():
            if name == text:
                return label
        raise ValueError(f"unknown final label {text!r}")


_LABEL_TEXT = {
    FinalLabel.MANAGEMENT: "Management",
    FinalLabel.ACTIVE_PLAYING: "Active Playing",
    FinalLabel.NON_ACTIVE_PLAYING: "Non-Active Playing",
    FinalLabel.OUT_OF_VIEW: "Out of View",
    FinalLabel.NOT_PLAYING: "Not Playing",
}


class StateClass(enum.Enum):
    MANAGEMENT = "Management"
    ACTIVE_PLAY = "ActivePlay"
    NON_ACTIVE_PLAY = "NonActivePlay"
    OUT_OF_VIEW = "OutOfView"
    OTHER = "Other"


_STATE_TO_LABEL = {
    StateClass.MANAGEMENT: FinalLabel.MANAGEMENT,
    StateClass.ACTIVE_PLAY: FinalLabel.ACTIVE_PLAYING,
    StateClass.NON_ACTIVE_PLAY: FinalLabel.NON_ACTIVE_PLAYING,
    StateClass.OUT_OF_VIEW: FinalLabel.OUT_OF_VIEW,
    StateClass.OTHER: FinalLabel.NOT_PLAYING,
}


def assign_final_label(states: Iterable[StateClass]) -> FinalLabel:
    """Management > active play > non-active play > out of view > not playing."""
    states = set(states)
    if StateClass.MANAGEMENT in states:
        return FinalLabel.MANAGEMENT
    if StateClass.ACTIVE_PLAY in states:
        return FinalLabel.ACTIVE_PLAYING
    if StateClass.NON_ACTIVE_PLAY in states:
        return FinalLabel.NON_ACTIVE_PLAYING
    if StateClass.OUT_OF_VIEW in states:
        return FinalLabel.OUT_OF_VIEW
    return FinalLabel.NOT_PLAYING


@dataclass
class LabelPartition:
    """Which behaviours count as active vs non-active play.

    Defaults: locomotor and social play are active, object and straw play are
    non-active.  ``overrides`` maps individual behaviour codes to a class and
    takes precedence over the category rule.
    """

    active_categories: frozenset[Category] = frozenset({Category.LOCOMOTOR, Category.SOCIAL})
    non_active_categories: frozenset[Category] = frozenset({Category.OBJECT, Category.STRAW})
    management_codes: frozenset[str] = frozenset({"management"})
    out_of_view_codes: frozenset[str] = frozenset({"outofview"})
    overrides: dict[str, StateClass] = field(default_factory=dict)

    def classify(self, behaviour: str, category: Category) -> StateClass:
        key = normalize_code(behaviour)
        if key in self.overrides:
            return self.overrides[key]
        if key in self.management_codes:
            return StateClass.MANAGEMENT
        if key in self.out_of_view_codes:
            return StateClass.OUT_OF_VIEW
        if category in self.active_categories:
            return StateClass.ACTIVE_PLAY
        if category in self.non_active_categories:
            return StateClass.NON_ACTIVE_PLAY
        return StateClass.OTHER


@dataclass(frozen=True)
class StateSpan:
    """A behaviour interval placed on the wall clock (millisecond resolution)."""

    subject: str
    behaviour: str
    category: Category
    start_ms: int
    stop_ms: int

    @property
    def start(self) -> datetime:
        return from_ms(self.start_ms)

    @property
    def stop(self) -> datetime:
        return from_ms(self.stop_ms)


def to_absolute(intervals: Iterable[BehaviourInterval], video_start: datetime) -> list[StateSpan]:
    return [
        StateSpan(
            iv.subject,
            iv.behaviour,
            iv.category,
            to_ms(annotation_to_absolute(video_start, iv.start_s)),
            to_ms(annotation_to_absolute(video_start, iv.stop_s)),
        )
        for iv in intervals
    ]


def active_states_at(spans: Iterable[StateSpan], t: datetime | int, subject: str | None = None) -> list[StateSpan]:
    """Spans with ``start <= t < stop`` (half-open), optionally for one subject."""
    t_ms = t if isinstance(t, int) else to_ms(t)
    return [s for s in spans if (subject is None or s.subject == subject) and s.start_ms <= t_ms < s.stop_ms]


def match_nearest(event_ms: Sequence[int], frame_ms: Sequence[int], tolerance_ms: int) -> list[int | None]:
    """Index of the nearest frame for each event, or None beyond tolerance.

    ``frame_ms`` must be sorted.  Equidistant frames resolve to the earlier one.
    """
    out = []
    n = len(frame_ms)
    for t in event_ms:
        k = bisect.bisect_left(frame_ms, t)
        best = None
        if k > 0:
            best = k - 1
        if k < n and (best is None or frame_ms[k] - t < t - frame_ms[best]):
            best = k
        if best is not None and abs(frame_ms[best] - t) <= tolerance_ms:
            # among duplicate timestamps keep the first frame
            while best > 0 and frame_ms[best - 1] == frame_ms[best]:
                best -= 1
            out.append(best)
        else:
            out.append(None)
    return out


def subject_tracking_id(subject: str) -> int | None:
    """Default subject→track mapping: the subject's trailing integer (``Calf3`` → 3)."""
    m = re.search(r"(\d+)\s*$", subject)
    return int(m.group(1)) if m else None


@dataclass(frozen=True)
class UnmatchedEvent:
    subject: str
    behaviour: str
    kind: str  # "start" or "stop"
    time: datetime
    reason: str


@dataclass
class MatchResult:
    pairs: list[tuple[FrameMeta, list[StateSpan]]]
    matched_events: list[tuple[StateSpan, str, FrameMeta]] = field(default_factory=list)
    unmatched_events: list[UnmatchedEvent] = field(default_factory=list)
    unmatched_frames: list[FrameMeta] = field(default_factory=list)


def match_annotations_to_frames(
    spans: Sequence[StateSpan],
    frames: Sequence[FrameMeta],
    tolerance_s: float = 0.5,
    subject_ids: Mapping[str, int] | None = None,
) -> MatchResult:
    """Snap each state boundary to its nearest frame and label every frame.

    Every start/stop event is matched to the nearest frame of the subject's
    track with ``|dt| <= tolerance_s``.  A matched boundary moves to that
    frame's timestamp; an unmatched one keeps its own time and is reported.
    Frames then carry the states whose snapped span contains them
    (half-open).  A bout shorter than the frame spacing whose start and stop
    snap to the same frame still labels that frame.  Frames whose track has
    no annotated subject are reported as unmatched.
    """
    if any(b.timestamp < a.timestamp for a, b in zip(frames, frames[1:])):
        log.info("frames not sorted by timestamp; sorting")
        frames = sorted(frames, key=lambda f: (f.timestamp, f.tracking_id))
    tol_ms = int(round(tolerance_s * 1000))

    subjects = sorted({s.subject for s in spans})
    track_of = {}
    for subject in subjects:
        tid = subject_ids.get(subject) if subject_ids is not None else subject_tracking_id(subject)
        track_of[subject] = tid

    tracks: dict[int, list[FrameMeta]] = defaultdict(list)
    for f in frames:
        tracks[f.tracking_id].append(f)

    result = MatchResult(pairs=[])
    labelled_tracks = {tid for tid in track_of.values() if tid is not None}
    for tid, track in tracks.items():
        if tid not in labelled_tracks:
            result.unmatched_frames.extend(track)

    spans_by_subject: dict[str, list[StateSpan]] = defaultdict(list)
    for s in spans:
        spans_by_subject[s.subject].append(s)

    states_for: dict[int, list[StateSpan]] = defaultdict(list)  # keyed by id(frame)
    for subject in subjects:
        tid = track_of[subject]
        track = tracks.get(tid, []) if tid is not None else []
        subject_spans = spans_by_subject[subject]
        if not track:
            for s in subject_spans:
                for kind, t in (("start", s.start_ms), ("stop", s.stop_ms)):
                    result.unmatched_events.append(
                        UnmatchedEvent(subject, s.behaviour, kind, from_ms(t), "no frames for subject")
                    )
            continue
        frame_ms = [to_ms(f.timestamp) for f in track]
        starts = match_nearest([s.start_ms for s in subject_spans], frame_ms, tol_ms)
        stops = match_nearest([s.stop_ms for s in subject_spans], frame_ms, tol_ms)
        for s, i_start, i_stop in zip(subject_spans, starts, stops):
            for kind, idx, t in (("start", i_start, s.start_ms), ("stop", i_stop, s.stop_ms)):
                if idx is None:
                    result.unmatched_events.append(
                        UnmatchedEvent(subject, s.behaviour, kind, from_ms(t), f"no frame within {tolerance_s} s")
                    )
                else:
                    result.matched_events.append((s, kind, track[idx]))
            lo = bisect.bisect_left(frame_ms, s.start_ms) if i_start is None else i_start
            hi = bisect.bisect_left(frame_ms, s.stop_ms) if i_stop is None else i_stop
            if hi <= lo and i_start is not None:
                hi = lo + 1
            for k in range(lo, hi):
                states_for[id(track[k])].append(s)

    for tid, track in tracks.items():
        if tid not in labelled_tracks:
            continue
        for f in track:
            result.pairs.append((f, states_for.get(id(f), [])))
    result.pairs.sort(key=lambda p: (p[0].timestamp, p[0].tracking_id))
    return result


@dataclass
class AlignedSample:
    timestamp: datetime
    primary_raw: str
    primary_label: str
    secondary_raw: str
    secondary_label: str
    tracking_id: int
    final_label: FinalLabel
    crop_path: str
    embedding_path: str
    frame: FrameMeta | None = None

    @property
    def excluded_from_training(self) -> bool:
        return self.final_label in (FinalLabel.OUT_OF_VIEW, FinalLabel.MANAGEMENT)


def build_samples(
    pairs: Iterable[tuple[FrameMeta, Sequence[StateSpan]]],
    partition: LabelPartition | None = None,
) -> list[AlignedSample]:
    """Resolve each (frame, states) pair into one aligned sample.

    The two highest-priority concurrent states fill the primary and secondary
    columns; ties go to the earlier-starting state.
    """
    partition = partition or LabelPartition()
    samples = []
    for frame, states in pairs:
        classed = [(partition.classify(s.behaviour, s.category), s) for s in states]
        ranked = sorted(classed, key=lambda cs: (-_STATE_TO_LABEL[cs[0]], cs[1].start_ms, cs[1].behaviour))
        final = assign_final_label(c for c, _ in classed)
        primary = ranked[0] if ranked else None
        secondary = ranked[1] if len(ranked) > 1 else None
        samples.append(
            AlignedSample(
                timestamp=frame.timestamp,
                primary_raw=primary[1].behaviour if primary else "",
                primary_label=_STATE_TO_LABEL[primary[0]].text if primary else FinalLabel.NOT_PLAYING.text,
                secondary_raw=secondary[1].behaviour if secondary else "",
                secondary_label=_STATE_TO_LABEL[secondary[0]].text if secondary else "",
                tracking_id=frame.tracking_id,
                final_label=final,
                crop_path=frame.crop_path,
                embedding_path=frame.embedding_path,
                frame=frame,
            )
        )
    return samples


METADATA_COLUMNS = (
    "Timestamp",
    "Primary_Raw",
    "Primary_Label",
    "Secondary_Raw",
    "Secondary_Label",
    "ID",
    "Final_Label",
    "Frame_Directory",
    "Embeddings_Directory",
)
EXCLUDED_COLUMN = "Excluded_From_Training"


def format_iso_ms(ts: datetime) -> str:
    return ts.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ts.microsecond // 1000:03d}Z"


def parse_iso_ms(text: str) -> datetime:
    return datetime.strptime(text.rstrip("Z"), "%Y-%m-%dT%H:%M:%S.%f")


def build_metadata_table(samples: Iterable[AlignedSample], stream: IO[str], exclusion_flag: bool = True) -> int:
    """Write the integrated metadata table; returns the number of data rows.

    Out-of-view (and management) rows stay in the table and are marked in a
    trailing ``Excluded_From_Training`` column.
    """
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(METADATA_COLUMNS + ((EXCLUDED_COLUMN,) if exclusion_flag else ()))
    n = 0
    for i, s in enumerate(samples, start=1):
        if not s.crop_path or not s.embedding_path:
            raise RowError("empty Frame_Directory or Embeddings_Directory", "metadata", i)
        row = [
            format_iso_ms(s.timestamp),
            s.primary_raw,
            s.primary_label,
            s.secondary_raw,
            s.secondary_label,
            s.tracking_id,
            s.final_label.text,
            s.crop_path,
            s.embedding_path,
        ]
        if exclusion_flag:
            row.append(int(s.excluded_from_training))
        writer.writerow(row)
        n += 1
    return n


def read_metadata_table(source: IO[str] | str | Path, source_name: str | None = None) -> list[AlignedSample]:
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_metadata_table(fh, source_name or str(source))
    name = source_name or "<stream>"
    reader = csv.DictReader(source)
    for column in METADATA_COLUMNS:
        if column not in (reader.fieldnames or ()):
            raise SchemaError(column, name)
    out = []
    for row in reader:
        try:
            out.append(
                AlignedSample(
                    timestamp=parse_iso_ms(row["Timestamp"]),
                    primary_raw=row["Primary_Raw"],
                    primary_label=row["Primary_Label"],
                    secondary_raw=row["Secondary_Raw"],
                    secondary_label=row["Secondary_Label"],
                    tracking_id=int(row["ID"]),
                    final_label=FinalLabel.from_text(row["Final_Label"]),
                    crop_path=row["Frame_Directory"],
                    embedding_path=row["Embeddings_Directory"],
                )
            )
        except ValueError as exc:
            raise RowError(str(exc), name, reader.line_num) from None
    return out


FRAME_COLUMNS = (
    "timestamp", "frame_index", "tracking_id", "x", "y", "w", "h", "confidence",
    "mean_intensity", "occlusion_fraction", "mask_area", "crop_path", "embedding_path",
)


def read_frames(
    source: IO[str] | str | Path,
    source_name: str | None = None,
    timestamps: Mapping[int, datetime] | None = None,
) -> tuple[list[FrameMeta], list[int]]:
    """Read per-detection frame metadata.

    With ``timestamps`` (frame_index → repaired OCR time) the timestamp column
    may be blank; rows whose frame has no resolved time are skipped and their
    line numbers returned.
    """
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_frames(fh, source_name or str(source), timestamps)
    name = source_name or "<stream>"
    reader = csv.DictReader(source)
    fields = reader.fieldnames or ()
    required = ["tracking_id", "x", "y", "w", "h", "confidence", "mean_intensity",
                "occlusion_fraction", "crop_path", "embedding_path"]
    required.append("frame_index" if timestamps is not None else "timestamp")
    for column in required:
        if column not in fields:
            raise SchemaError(column, name)
    frames, skipped = [], []
    for row in reader:
        line = reader.line_num
        try:
            frame_index = int(row["frame_index"]) if row.get("frame_index") not in (None, "") else None
            raw_ts = (row.get("timestamp") or "").strip()
            if raw_ts:
                ts = parse_iso_ms(raw_ts) if "T" in raw_ts else datetime.fromisoformat(raw_ts)
            elif timestamps is not None and frame_index is not None:
                ts = timestamps.get(frame_index)
                if ts is None:
                    skipped.append(line)
                    continue
            else:
                raise ValueError("missing timestamp")
            mask = row.get("mask_area")
            frames.append(
                FrameMeta(
                    timestamp=ts,
                    tracking_id=int(row["tracking_id"]),
                    bbox=(float(row["x"]), float(row["y"]), float(row["w"]), float(row["h"])),
                    confidence=float(row["confidence"]),
                    mean_intensity=float(row["mean_intensity"]),
                    occlusion_fraction=float(row["occlusion_fraction"]),
                    crop_path=row["crop_path"],
                    embedding_path=row["embedding_path"],
                    mask_area=float(mask) if mask not in (None, "") else None,
                    frame_index=frame_index,
                )
            )
        except ValueError as exc:
            raise RowError(str(exc), name, line) from None
    frames.sort(key=lambda f: (f.timestamp, f.tracking_id))
    return frames, skipped


def write_frames(frames: Iterable[FrameMeta], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(FRAME_COLUMNS)
    for f in frames:
        writer.writerow([
            format_iso_ms(f.timestamp),
            "" if f.frame_index is None else f.frame_index,
            f.tracking_id,
            *(repr(float(v)) for v in f.bbox),
            repr(f.confidence),
            repr(f.mean_intensity),
            repr(f.occlusion_fraction),
            "" if f.mask_area is None else repr(f.mask_area),
            f.crop_path,
            f.embedding_path,
        ])


def default_partition(table: EthogramTable | None = None) -> LabelPartition:
    """Default partition; validates that its codes exist in the ethogram."""
    table = table or load_ethogram()
    part = LabelPartition()
    for key in part.management_codes | part.out_of_view_codes:
        if not any(normalize_code(e.code) == key for e in table):
            log.warning("partition code %r not present in ethogram", key)
    return part
