"""Detection-confidence and frame-exclusion filters.

Reasons are attributed first-match in this order: out-of-view gap, occlusion,
small bounding box, extreme intensity, oversized mask.
"""

from __future__ import annotations

import json
import statistics
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from typing import IO, Any, Iterable, Sequence

from .alignment import AlignedSample, FinalLabel, FrameMeta, format_iso_ms, to_ms

REASONS = ("out_of_view_gap", "occlusion", "small_bbox", "intensity", "oversized_mask")


@dataclass(frozen=True)
class FilterConfig:
    min_confidence: float = 0.55
    max_out_of_view_s: float = 5.0
    max_occlusion_fraction: float = 0.5
    min_bbox_px: float = 100
    min_intensity: float = 30
    max_intensity: float = 225
    max_mask_area_ratio: float = 2.0
    median_window: int = 200

    def __post_init__(self) -> None:
        for name in ("min_confidence", "max_out_of_view_s", "max_occlusion_fraction", "min_bbox_px",
                     "min_intensity", "max_intensity", "max_mask_area_ratio", "median_window"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.min_intensity >= self.max_intensity:
            raise ValueError("min_intensity must be below max_intensity")


@dataclass
class ExclusionReport:
    input_count: int = 0
    retained: int = 0
    excluded: dict[str, int] = field(default_factory=lambda: {r: 0 for r in REASONS})
    gaps: dict[int, list[dict[str, Any]]] = field(default_factory=dict)

    def check(self) -> None:
        assert self.retained + sum(self.excluded.values()) == self.input_count

    def write_jsonl(self, stream: IO[str], per_track: dict[int, Counter] | None = None) -> None:
        """One JSON object per track."""
        for tid in sorted(set(self.gaps) | set(per_track or {})):
            counts = (per_track or {}).get(tid, Counter())
            obj = {
                "tracking_id": tid,
                "retained": counts.get("retained", 0),
                "excluded": {r: counts.get(r, 0) for r in REASONS},
                "gaps": self.gaps.get(tid, []),
            }
            stream.write(json.dumps(obj, sort_keys=True) + "\n")


def filter_detections(frames: Iterable[FrameMeta], cfg: FilterConfig | None = None) -> tuple[list[FrameMeta], dict[str, int]]:
    """Keep detections with confidence >= cfg.min_confidence."""
    cfg = cfg or FilterConfig()
    kept, dropped = [], 0
    for f in frames:
        if f.confidence >= cfg.min_confidence:
            kept.append(f)
        else:
            dropped += 1
    return kept, {"input": len(kept) + dropped, "retained": len(kept), "low_confidence": dropped}


def _frame(item: Any) -> FrameMeta:
    return item.frame if isinstance(item, AlignedSample) else item


def _out_of_view(item: Any) -> bool:
    return isinstance(item, AlignedSample) and item.final_label is FinalLabel.OUT_OF_VIEW


def _per_frame_reason(f: FrameMeta, cfg: FilterConfig) -> str | None:
    if f.occlusion_fraction > cfg.max_occlusion_fraction:
        return "occlusion"
    if min(f.bbox[2], f.bbox[3]) < cfg.min_bbox_px:
        return "small_bbox"
    if f.mean_intensity < cfg.min_intensity or f.mean_intensity > cfg.max_intensity:
        return "intensity"
    return None


def _ts(f: FrameMeta) -> int:
    return to_ms(f.timestamp)


def exclude_frames(samples: Sequence[Any], cfg: FilterConfig | None = None) -> tuple[list[Any], ExclusionReport, dict[int, Counter]]:
    """Split samples (AlignedSample or bare FrameMeta) into retained and excluded.

    Per track, in time order:

    * occlusion, bbox and intensity are judged frame by frame;
    * a frame's mask area is compared with the median bbox area of the last
      ``median_window`` in-view frames of the track that passed every
      per-frame test (no history, no verdict);
    * out-of-view runs are maximal runs of out-of-view samples among those
      that passed the per-frame tests; a run lasts from its first sample to
      the next in-view survivor (or its own last sample at the end of the
      track).  Every sample inside a run longer than ``max_out_of_view_s``
      is excluded, whatever else is wrong with it.

    Measuring runs only over survivors keeps the filter idempotent.  Gaps in
    detection (no frames at all for longer than ``max_out_of_view_s``) are
    listed in the report but have no frames to exclude.
    """
    cfg = cfg or FilterConfig()
    limit_ms = cfg.max_out_of_view_s * 1000
    report = ExclusionReport(input_count=len(samples))
    per_track: dict[int, Counter] = defaultdict(Counter)
    tracks: dict[int, list[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        tracks[_frame(s).tracking_id].append(i)

    reason_of: dict[int, str | None] = {}
    for tid, idxs in tracks.items():
        idxs.sort(key=lambda i: (_frame(samples[i]).timestamp, i))
        history: deque[float] = deque(maxlen=cfg.median_window)
        survivors = []
        for i in idxs:
            f = _frame(samples[i])
            reason = _per_frame_reason(f, cfg)
            if reason is None and f.mask_area is not None and history:
                if f.mask_area > cfg.max_mask_area_ratio * statistics.median(history):
                    reason = "oversized_mask"
            reason_of[i] = reason
            if reason is None:
                survivors.append(i)
                if not _out_of_view(samples[i]):
                    history.append(f.bbox_area)

        gaps = []
        runs = []
        k = 0
        while k < len(survivors):
            if not _out_of_view(samples[survivors[k]]):
                k += 1
                continue
            j = k
            while j + 1 < len(survivors) and _out_of_view(samples[survivors[j + 1]]):
                j += 1
            t0 = _ts(_frame(samples[survivors[k]]))
            end = survivors[j + 1] if j + 1 < len(survivors) else survivors[j]
            t1 = _ts(_frame(samples[end]))
            runs.append((t0, t1))
            gaps.append({
                "kind": "out_of_view",
                "start": format_iso_ms(_frame(samples[survivors[k]]).timestamp),
                "stop": format_iso_ms(_frame(samples[end]).timestamp),
                "duration_s": (t1 - t0) / 1000,
                "excluded": (t1 - t0) > limit_ms,
            })
            k = j + 1
        for a, b in zip(idxs, idxs[1:]):
            dt = _ts(_frame(samples[b])) - _ts(_frame(samples[a]))
            if dt > limit_ms:
                gaps.append({
                    "kind": "detection",
                    "start": format_iso_ms(_frame(samples[a]).timestamp),
                    "stop": format_iso_ms(_frame(samples[b]).timestamp),
                    "duration_s": dt / 1000,
                    "excluded": False,
                })

        long_runs = [(t0, t1) for t0, t1 in runs if t1 - t0 > limit_ms]
        for i in idxs:
            if not _out_of_view(samples[i]):
                continue
            t = _ts(_frame(samples[i]))
            if any(t0 <= t <= t1 for t0, t1 in long_runs):
                reason_of[i] = "out_of_view_gap"
        if gaps:
            report.gaps[tid] = sorted(gaps, key=lambda g: (g["start"], g["kind"]))

    retained = []
    for i, s in enumerate(samples):
        reason = reason_of[i]
        tid = _frame(s).tracking_id
        if reason is None:
            retained.append(s)
            per_track[tid]["retained"] += 1
        else:
            report.excluded[reason] += 1
            per_track[tid][reason] += 1
    report.retained = len(retained)
    report.check()
    return retained, report, dict(per_track)
