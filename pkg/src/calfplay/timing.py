"""Absolute time: video filenames, burned-in OCR timestamps, annotation offsets.

All timestamps are naive local wall-clock times; no timezone is attached or
inferred.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import IO, Sequence

from .errors import RowError, SchemaError, TimestampError

log = logging.getLogger(__name__)

VIDEO_EXTENSIONS = (".mp4", ".avi", ".mkv", ".mov", ".m4v", ".h264", ".ts")
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
# digit slots of "YYYY-MM-DD HH:MM:SS"; everything else is a fixed separator
_PATTERN = "dddd-dd-dd dd:dd:dd"
_CONFUSIONS = {
    "O": "0", "o": "0",
    "I": "1", "l": "1", "|": "1",
    "S": "5", "s": "5",
    "B": "8",
    "Z": "2", "z": "2",
}


@dataclass(frozen=True)
class VideoDescriptor:
    farm: str
    camera: str
    start_time: datetime
    filename: str

    @property
    def stem(self) -> str:
        return Path(self.filename).stem


def parse_video_filename(name: str) -> VideoDescriptor:
    """Parse ``Farm_Camera_YYYYMMDD_HHMMSS.<ext>``.

    Date and time are the two rightmost underscore fields, so farm names may
    themselves contain underscores.
    """
    base = Path(name).name
    stem, ext = Path(base).stem, Path(base).suffix.lower()
    if ext not in VIDEO_EXTENSIONS:
        raise TimestampError(f"{name}: not a recognised video file")
    parts = stem.split("_")
    if len(parts) < 4:
        raise TimestampError(f"{name}: expected Farm_Camera_YYYYMMDD_HHMMSS")
    date_part, time_part = parts[-2], parts[-1]
    if not (len(date_part) == 8 and date_part.isdigit() and len(time_part) == 6 and time_part.isdigit()):
        raise TimestampError(f"{name}: malformed date/time fields {date_part!r}_{time_part!r}")
    try:
        start = datetime.strptime(date_part + time_part, "%Y%m%d%H%M%S")
    except ValueError:
        raise TimestampError(f"{name}: invalid date/time {date_part}_{time_part}") from None
    farm, camera = "_".join(parts[:-3]), parts[-3]
    if not farm or not camera:
        raise TimestampError(f"{name}: empty farm or camera field")
    return VideoDescriptor(farm=farm, camera=camera, start_time=start, filename=base)


def video_for_log(path: str | Path) -> VideoDescriptor:
    """Descriptor for a per-video side file such as ``<video>.csv`` or ``<video>.mp4.csv``."""
    stem = Path(path).name
    for suffix in (".csv", ".tsv", ".txt"):
        if stem.lower().endswith(suffix):
            stem = stem[: -len(suffix)]
            break
    if not stem.lower().endswith(VIDEO_EXTENSIONS):
        stem += ".mp4"
    return parse_video_filename(stem)


def annotation_to_absolute(video_start: datetime, seconds: float) -> datetime:
    """``video_start + seconds`` at millisecond precision."""
    if seconds < 0:
        raise ValueError(f"negative annotation offset {seconds}")
    ms = int((Decimal(str(seconds)) * 1000).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    return video_start + timedelta(milliseconds=ms)


class OcrStatus(str, enum.Enum):
    OK = "Ok"
    CORRECTED = "Corrected"
    FAILED = "Failed"


@dataclass(frozen=True)
class OcrReading:
    frame_index: int
    raw: str
    parsed: datetime | None
    status: OcrStatus


def format_timestamp(ts: datetime) -> str:
    return ts.strftime(TIMESTAMP_FORMAT)


def correct_ocr_string(raw: str) -> tuple[str | None, OcrStatus]:
    """Repair character confusions in an OCR'd ``YYYY-MM-DD HH:MM:SS`` string.

    Substitutions are applied only at digit slots of the pattern.  Anything
    that still fails the pattern, or is not a real calendar time, is Failed.
    """
    text = raw.strip()
    if len(text) != len(_PATTERN):
        return None, OcrStatus.FAILED
    out = []
    for ch, slot in zip(text, _PATTERN):
        if slot == "d":
            ch = _CONFUSIONS.get(ch, ch)
            if not ch.isdigit() or not ch.isascii():
                return None, OcrStatus.FAILED
        elif ch != slot:
            return None, OcrStatus.FAILED
        out.append(ch)
    fixed = "".join(out)
    try:
        datetime.strptime(fixed, TIMESTAMP_FORMAT)
    except ValueError:
        return None, OcrStatus.FAILED
    return fixed, (OcrStatus.OK if fixed == raw else OcrStatus.CORRECTED)


def read_ocr(frame_index: int, raw: str) -> OcrReading:
    fixed, status = correct_ocr_string(raw)
    parsed = None if fixed is None else datetime.strptime(fixed, TIMESTAMP_FORMAT)
    return OcrReading(frame_index, raw, parsed, status)


def load_ocr_readings(source: IO[str] | str | Path, source_name: str | None = None) -> list[OcrReading]:
    """Read ``frame_index, raw_string`` rows and run confusion repair on each."""
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8-sig") as fh:
            return load_ocr_readings(fh, source_name or str(source))
    name = source_name or "<stream>"
    reader = csv.DictReader(source)
    for column in ("frame_index", "raw_string"):
        if column not in (reader.fieldnames or ()):
            raise SchemaError(column, name)
    readings = []
    for row in reader:
        try:
            idx = int(row["frame_index"])
        except (TypeError, ValueError):
            raise RowError(f"bad frame_index {row['frame_index']!r}", name, reader.line_num) from None
        if idx < 0:
            raise RowError("negative frame_index", name, reader.line_num)
        readings.append(read_ocr(idx, row["raw_string"] or ""))
    readings.sort(key=lambda r: r.frame_index)
    return readings


@dataclass
class SeriesReport:
    total_frames: int
    successful: int
    success_rate_pct: float
    monotonicity_violations: list[int] = field(default_factory=list)
    repaired: int = 0
    outliers: list[int] = field(default_factory=list)
    unresolved: list[int] = field(default_factory=list)
    residual_violations: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "total_frames": self.total_frames,
            "successful": self.successful,
            "success_rate_pct": self.success_rate_pct,
            "monotonicity_violations": self.monotonicity_violations,
            "repaired": self.repaired,
            "outliers": self.outliers,
            "unresolved": self.unresolved,
            "residual_violations": self.residual_violations,
        }


def success_rate(successful: int, total: int) -> float:
    """Percentage of frames with a usable OCR timestamp."""
    if total <= 0:
        raise ValueError("no frames")
    return successful / total * 100


def _violations(indices: list[int], times: list[datetime | None]) -> list[int]:
    out, last = [], None
    for idx, t in zip(indices, times):
        if t is None:
            continue
        if last is not None and t < last:
            out.append(idx)
        else:
            last = t
    return out


def validate_timestamp_series(
    readings: Sequence[OcrReading],
    nominal_fps: float,
    outlier_factor: float = 2.0,
    window: int = 25,
    resolution_s: float = 1.0,
) -> tuple[SeriesReport, list[OcrReading]]:
    """Score an OCR timestamp series and repair what can be repaired safely.

    A parsed value is an isolated outlier when its offset from both nearest
    parsed neighbours differs from the frame-count expectation by more than
    ``max(outlier_factor / fps, resolution_s)`` (burned-in clocks only tick
    whole seconds).  Outliers, and Failed frames whose nearest good
    neighbours on both sides lie within ``window`` frames, are linearly
    interpolated by frame index and marked Corrected.
    """
    if not readings:
        raise ValueError("empty OCR series")
    if nominal_fps <= 0:
        raise ValueError("nominal_fps must be positive")
    frames = [r.frame_index for r in readings]
    if any(b <= a for a, b in zip(frames, frames[1:])):
        raise ValueError("readings must be strictly ordered by frame_index")

    n = len(readings)
    times = [r.parsed for r in readings]
    successful = sum(t is not None for t in times)
    tol = max(outlier_factor / nominal_fps, resolution_s)

    def consistent(i: int, j: int) -> bool:
        observed = (times[i] - times[j]).total_seconds()
        expected = (frames[i] - frames[j]) / nominal_fps
        return abs(observed - expected) <= tol

    parsed_idx = [i for i in range(n) if times[i] is not None]
    outliers = set()
    for k in range(1, len(parsed_idx) - 1):
        i = parsed_idx[k]
        if not consistent(i, parsed_idx[k - 1]) and not consistent(i, parsed_idx[k + 1]):
            outliers.add(i)

    good = [times[i] is not None and i not in outliers for i in range(n)]
    prev_good = [None] * n
    last = None
    for i in range(n):
        prev_good[i] = last
        if good[i]:
            last = i
    next_good = [None] * n
    last = None
    for i in range(n - 1, -1, -1):
        next_good[i] = last
        if good[i]:
            last = i

    repaired_series = list(readings)
    repaired, unresolved = 0, []
    for i in range(n):
        if good[i]:
            continue
        lo, hi = prev_good[i], next_good[i]
        reachable = lo is not None and hi is not None
        if reachable and i not in outliers:
            reachable = frames[i] - frames[lo] <= window and frames[hi] - frames[i] <= window
        if not reachable:
            if i not in outliers:
                unresolved.append(frames[i])
            continue
        span = frames[hi] - frames[lo]
        delta = (times[hi] - times[lo]) * ((frames[i] - frames[lo]) / span)
        repaired_series[i] = replace(readings[i], parsed=times[lo] + delta, status=OcrStatus.CORRECTED)
        repaired += 1

    report = SeriesReport(
        total_frames=n,
        successful=successful,
        success_rate_pct=success_rate(successful, n),
        monotonicity_violations=_violations(frames, times),
        repaired=repaired,
        outliers=sorted(frames[i] for i in outliers),
        unresolved=unresolved,
        residual_violations=_violations(frames, [r.parsed for r in repaired_series]),
    )
    return report, repaired_series
