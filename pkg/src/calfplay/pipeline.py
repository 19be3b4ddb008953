"""Pipeline stages behind the command-line interface.

Input directory layout::

    events/<video stem>.csv   behavioural event logs, one per video
    frames/<video stem>.csv   per-detection frame metadata
    ocr/<video stem>.csv      optional raw OCR strings (frame_index, raw_string)
    calves.csv                calf records (needed by fit-lmm only)
    subjects.csv              optional subject -> tracking_id mapping

Each stage writes under ``<output>/<stage>/`` and refuses to run if the
stage it depends on has not completed.  Outputs contain no wall-clock
times, so identical inputs and settings give byte-identical files.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .alignment import (AlignedSample, FinalLabel, build_metadata_table, build_samples, default_partition,
                        format_iso_ms, match_annotations_to_frames, parse_iso_ms, read_frames,
                        read_metadata_table, to_absolute, write_frames)
from .classifier import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from .dataset import (CLASSES, ManifestRow, class_of, load_embeddings, read_manifest, stratified_downsample,
                      stratified_split, write_manifest)
from .errors import CalfplayError, RowError, SchemaError, StageError
from .ethogram import BehaviourInterval, Category, load_ethogram, pair_state_events, parse_event_log
from .filtering import REASONS, FilterConfig, exclude_frames
from .lmm import (LmmSpec, adjusted_means, fit_random_intercept, icc, information_criteria, levene_brown_forsythe,
                  lr_test, lsd_pairwise, r_squared, wald_test)
from .metrics import (OBSERVATION_SECONDS, SpaceCategory, descriptive_stats, read_calf_records,
                      summarize_by_subject, write_summary_table)
from .timing import load_ocr_readings, validate_timestamp_series, video_for_log

log = logging.getLogger(__name__)

OUTPUT_ENV = "CALFPLAY_OUTPUT_ROOT"
STAGES = ("ingest", "align", "filter", "metrics", "fit-lmm", "prepare", "train", "evaluate", "report")
_UPSTREAM = {
    "align": "ingest", "filter": "align", "metrics": "ingest", "fit-lmm": "metrics",
    "prepare": "filter", "train": "prepare", "evaluate": "train", "report": "ingest",
}

DEFAULTS: dict[str, dict[str, Any]] = {
    "paths": {"input": ".", "output": "calfplay_out", "subjects": "", "calves": ""},
    "ingest": {"nominal_fps": 25.0},
    "align": {"tolerance_s": 0.5},
    "filter": {f.name: f.default for f in dataclasses.fields(FilterConfig)},
    "metrics": {"observation_seconds": float(OBSERVATION_SECONDS), "deduct_unobserved": False},
    "lmm": {"method": "ml", "response": "percent_op_total", "factors": "space_category", "covariates": "age_days"},
    "prepare": {"seed": 0, "fractions": "0.70,0.15,0.15"},
    "train": {f.name: f.default for f in dataclasses.fields(TrainConfig)},
}


def _coerce(default: Any, text: str, where: str) -> Any:
    try:
        if isinstance(default, bool):
            return text.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise CalfplayError(f"config {where}: cannot parse {text!r} as {type(default).__name__}") from None
    return text.strip()


@dataclass
class PipelineConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=lambda: json.loads(json.dumps(DEFAULTS)))
    jobs: int = 1

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict[str, str] | None = None) -> "PipelineConfig":
        """Defaults, then the INI file, then ``section.key`` overrides."""
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser()
            if not parser.read(path, encoding="utf-8"):
                raise CalfplayError(f"config file {path} not found")
            for section in parser.sections():
                for key, text in parser.items(section):
                    cfg.set(f"{section}.{key}", text)
        env = os.environ.get(OUTPUT_ENV)
        if env:
            cfg.values["paths"]["output"] = env
        for dotted, text in (overrides or {}).items():
            cfg.set(dotted, text)
        return cfg

    def set(self, dotted: str, text: str) -> None:
        section, _, key = dotted.partition(".")
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise CalfplayError(f"unknown config key {dotted!r}")
        self.values[section][key] = _coerce(DEFAULTS[section][key], str(text), dotted)

    def get(self, dotted: str) -> Any:
        section, _, key = dotted.partition(".")
        return self.values[section][key]

    @property
    def input_dir(self) -> Path:
        return Path(self.values["paths"]["input"])

    @property
    def output_dir(self) -> Path:
        return Path(self.values["paths"]["output"])

    def filter_config(self) -> FilterConfig:
        return FilterConfig(**self.values["filter"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.values["train"])

    def fractions(self) -> tuple[float, ...]:
        try:
            return tuple(float(x) for x in self.values["prepare"]["fractions"].split(","))
        except ValueError:
            raise CalfplayError(f"bad split fractions {self.values['prepare']['fractions']!r}") from None

    def config_hash(self) -> str:
        """Hash of every setting except file locations."""
        settings = {k: v for k, v in self.values.items() if k != "paths"}
        blob = json.dumps(settings, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def provenance(self, stage: str, seed: int | None = None) -> dict[str, Any]:
        return {
            "tool": "calfplay",
            "version": __version__,
            "stage": stage,
            "config_hash": self.config_hash(),
            "seed": seed,
        }


# -- output helpers --------------------------------------------------------

def _stage_dir(cfg: PipelineConfig, stage: str) -> Path:
    d = cfg.output_dir / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_table(path: Path, writer: Callable[[io.StringIO], Any], provenance: dict) -> Any:
    buf = io.StringIO()
    result = writer(buf)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")
    _write_json(path.with_name(path.name + ".provenance.json"), provenance)
    return result


def _status_file(cfg: PipelineConfig, stage: str) -> Path:
    return cfg.output_dir / stage / "status.json"


def _mark_done(cfg: PipelineConfig, stage: str, seed: int | None = None) -> None:
    _write_json(_status_file(cfg, stage), {"status": "ok", "provenance": cfg.provenance(stage, seed)})


def _require(cfg: PipelineConfig, stage: str) -> None:
    needed = _UPSTREAM[stage]
    path = _status_file(cfg, needed)
    ok = path.exists() and json.loads(path.read_text(encoding="utf-8")).get("status") == "ok"
    if not ok:
        raise StageError(f"{stage} needs the output of '{needed}'; run `calfplay {needed}` first")


def _map(cfg: PipelineConfig, fn, items):
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


# -- ingest ----------------------------------------------------------------

INTERVAL_COLUMNS = ("farm", "camera", "video", "video_start", "subject", "behaviour", "category",
                    "modifier", "start_ds", "stop_ds", "flags")


@dataclass
class VideoIntervals:
    farm: str
    camera: str
    video: str
    video_start: datetime
    intervals: list[BehaviourInterval]


def _ingest_video(cfg: PipelineConfig, table, event_path: Path) -> dict:
    desc = video_for_log(event_path)
    events = parse_event_log(event_path, source_name=str(event_path))
    intervals = pair_state_events(events, table)
    result = {"video": desc, "intervals": intervals, "n_events": len(events), "frames": None, "ocr": None}
    frame_path = cfg.input_dir / "frames" / event_path.name
    if frame_path.exists():
        ocr_path = cfg.input_dir / "ocr" / event_path.name
        timestamps = None
        if ocr_path.exists():
            readings = load_ocr_readings(ocr_path)
            report, repaired = validate_timestamp_series(readings, cfg.get("ingest.nominal_fps"))
            result["ocr"] = report.to_dict()
            timestamps = {r.frame_index: r.parsed for r in repaired if r.parsed is not None}
        frames, skipped = read_frames(frame_path, str(frame_path), timestamps)
        result["frames"] = frames
        result["skipped_frame_rows"] = skipped
    return result


def cmd_ingest(cfg: PipelineConfig) -> dict:
    event_dir = cfg.input_dir / "events"
    event_files = sorted(event_dir.glob("*.csv")) if event_dir.is_dir() else []
    out = _stage_dir(cfg, "ingest")
    status = _status_file(cfg, "ingest")
    if status.exists():
        status.unlink()
    if not event_files:
        raise CalfplayError(f"no inputs: no event logs under {event_dir}")
    table = load_ethogram()

    errors: list[dict] = []

    def work(path: Path):
        try:
            return _ingest_video(cfg, table, path)
        except (CalfplayError, ValueError, OSError) as exc:
            return {"error": {"file": str(path), "message": str(exc)}}

    results = _map(cfg, work, event_files)
    for r in results:
        if "error" in r:
            errors.append(r["error"])
    summary = {
        "provenance": cfg.provenance("ingest"),
        "files": len(event_files),
        "errors": errors,
        "videos": [],
    }
    if errors:
        summary["status"] = "error"
        _write_json(out / "report.json", summary)
        raise CalfplayError("ingest failed:\n" + "\n".join(f"  {e['message']}" for e in errors))

    frames_dir = out / "frames"
    frames_dir.mkdir(exist_ok=True)

    def write_intervals(buf):
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(INTERVAL_COLUMNS)
        for r in results:
            d = r["video"]
            for iv in r["intervals"]:
                w.writerow([d.farm, d.camera, d.stem, format_iso_ms(d.start_time), iv.subject, iv.behaviour,
                            iv.category.value, iv.modifier or "", iv.start_ds, iv.stop_ds, ";".join(iv.flags)])

    _write_table(out / "intervals.csv", write_intervals, cfg.provenance("ingest"))
    for r in results:
        d = r["video"]
        entry = {"video": d.stem, "farm": d.farm, "camera": d.camera, "start": format_iso_ms(d.start_time),
                 "events": r["n_events"], "intervals": len(r["intervals"]),
                 "flagged_intervals": sum(1 for iv in r["intervals"] if iv.flags)}
        if r["frames"] is not None:
            _write_table(frames_dir / f"{d.stem}.csv", lambda buf, fr=r["frames"]: write_frames(fr, buf),
                         cfg.provenance("ingest"))
            entry["frames"] = len(r["frames"])
            entry["skipped_frame_rows"] = r["skipped_frame_rows"]
        if r["ocr"] is not None:
            entry["ocr"] = r["ocr"]
        summary["videos"].append(entry)
    summary["status"] = "ok"
    _write_json(out / "report.json", summary)
    _mark_done(cfg, "ingest")
    return summary


def read_intervals(path: Path) -> list[VideoIntervals]:
    by_video: dict[str, VideoIntervals] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for column in INTERVAL_COLUMNS:
            if column not in (reader.fieldnames or ()):
                raise SchemaError(column, str(path))
        for row in reader:
            try:
                v = by_video.get(row["video"])
                if v is None:
                    v = by_video[row["video"]] = VideoIntervals(
                        row["farm"], row["camera"], row["video"], parse_iso_ms(row["video_start"]), [])
                v.intervals.append(BehaviourInterval(
                    subject=row["subject"], behaviour=row["behaviour"], category=Category(row["category"]),
                    start_ds=int(row["start_ds"]), stop_ds=int(row["stop_ds"]),
                    modifier=row["modifier"] or None,
                    flags=tuple(f for f in row["flags"].split(";") if f),
                ))
            except ValueError as exc:
                raise RowError(str(exc), str(path), reader.line_num) from None
    return [by_video[k] for k in sorted(by_video)]


def _read_subject_map(cfg: PipelineConfig) -> dict[str, int] | None:
    configured = cfg.get("paths.subjects")
    path = Path(configured) if configured else cfg.input_dir / "subjects.csv"
    if not path.exists():
        if configured:
            raise CalfplayError(f"subjects file {path} not found")
        return None
    mapping = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for column in ("subject", "tracking_id"):
            if column not in (reader.fieldnames or ()):
                raise SchemaError(column, str(path))
        for row in reader:
            try:
                mapping[row["subject"]] = int(row["tracking_id"])
            except ValueError:
                raise RowError(f"bad tracking_id {row['tracking_id']!r}", str(path), reader.line_num) from None
    return mapping


# -- align -----------------------------------------------------------------

def cmd_align(cfg: PipelineConfig) -> dict:
    _require(cfg, "align")
    ingest_dir = cfg.output_dir / "ingest"
    videos = read_intervals(ingest_dir / "intervals.csv")
    subject_ids = _read_subject_map(cfg)
    partition = default_partition()
    samples: list[AlignedSample] = []
    report = {"provenance": cfg.provenance("align"), "videos": []}
    for v in videos:
        frame_path = ingest_dir / "frames" / f"{v.video}.csv"
        if not frame_path.exists():
            report["videos"].append({"video": v.video, "frames": 0, "note": "no frame metadata"})
            continue
        frames, _ = read_frames(frame_path, str(frame_path))
        spans = to_absolute(v.intervals, v.video_start)
        match = match_annotations_to_frames(spans, frames, cfg.get("align.tolerance_s"), subject_ids)
        video_samples = build_samples(match.pairs, partition)
        samples.extend(video_samples)
        report["videos"].append({
            "video": v.video,
            "frames": len(frames),
            "samples": len(video_samples),
            "matched_events": len(match.matched_events),
            "unmatched_events": len(match.unmatched_events),
            "unmatched_frames": len(match.unmatched_frames),
        })
    samples.sort(key=lambda s: (s.timestamp, s.tracking_id, s.crop_path))
    out = _stage_dir(cfg, "align")
    prov = cfg.provenance("align")
    _write_table(out / "metadata.csv", lambda buf: build_metadata_table(samples, buf), prov)
    _write_table(out / "frames.csv", lambda buf: write_frames([s.frame for s in samples], buf), prov)
    counts = defaultdict(int)
    for s in samples:
        counts[s.final_label.text] += 1
    report["samples"] = len(samples)
    report["final_labels"] = dict(sorted(counts.items()))
    _write_json(out / "report.json", report)
    _mark_done(cfg, "align")
    return report


# -- filter ----------------------------------------------------------------

def cmd_filter(cfg: PipelineConfig) -> dict:
    _require(cfg, "filter")
    align_dir = cfg.output_dir / "align"
    samples = read_metadata_table(align_dir / "metadata.csv")
    frames, _ = read_frames(align_dir / "frames.csv")
    if len(frames) != len(samples):
        raise CalfplayError("align outputs are inconsistent; rerun `calfplay align`")
    # read_frames sorts by (timestamp, id); the metadata table uses the same order
    for s, f in zip(samples, frames):
        s.frame = f
    fcfg = cfg.filter_config()
    confident = [s for s in samples if s.frame.confidence >= fcfg.min_confidence]
    retained, excl, per_track = exclude_frames(confident, fcfg)
    eligible = [s for s in retained if not s.excluded_from_training]
    out = _stage_dir(cfg, "filter")
    prov = cfg.provenance("filter")
    _write_table(out / "eligible.csv", lambda buf: build_metadata_table(eligible, buf, exclusion_flag=False), prov)
    with open(out / "exclusions.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"provenance": prov}, sort_keys=True) + "\n")
        excl.write_jsonl(fh, per_track)
    report = {
        "provenance": prov,
        "input": len(samples),
        "low_confidence": len(samples) - len(confident),
        "retained": excl.retained,
        "excluded": {r: excl.excluded[r] for r in REASONS},
        "not_for_training": len(retained) - len(eligible),
        "eligible": len(eligible),
    }
    _write_json(out / "report.json", report)
    _mark_done(cfg, "filter")
    return report


# -- metrics ---------------------------------------------------------------

def _calf_intervals(videos: list[VideoIntervals]) -> dict[tuple[str, str], list[BehaviourInterval]]:
    """Per (farm, subject) intervals on a common per-farm clock in tenths of a second."""
    origin: dict[str, datetime] = {}
    for v in videos:
        origin[v.farm] = min(origin.get(v.farm, v.video_start), v.video_start)
    out: dict[tuple[str, str], list[BehaviourInterval]] = defaultdict(list)
    for v in videos:
        shift = round((v.video_start - origin[v.farm]).total_seconds() * 10)
        for iv in v.intervals:
            out[(v.farm, iv.subject)].append(dataclasses.replace(
                iv, start_ds=iv.start_ds + shift, stop_ds=iv.stop_ds + shift))
    return out


def cmd_metrics(cfg: PipelineConfig) -> dict:
    _require(cfg, "metrics")
    videos = read_intervals(cfg.output_dir / "ingest" / "intervals.csv")
    base = cfg.get("metrics.observation_seconds")
    deduct = ("Management", "Out of view") if cfg.get("metrics.deduct_unobserved") else None
    rows = []
    for (farm, subject), ivs in sorted(_calf_intervals(videos).items()):
        summary = summarize_by_subject(ivs, base, deduct)[subject]
        rows.append((farm, subject, summary))
    out = _stage_dir(cfg, "metrics")
    prov = cfg.provenance("metrics")
    _write_table(out / "play_summary.csv", lambda buf: write_summary_table(rows, buf), prov)
    totals = [s.percent_op_total for _, _, s in rows]
    report = {"provenance": prov, "calves": len(rows)}
    if totals:
        d = descriptive_stats(totals)
        report["percent_op_total"] = dataclasses.asdict(d)
    _write_json(out / "report.json", report)
    _mark_done(cfg, "metrics")
    return report


# -- fit-lmm ---------------------------------------------------------------

_CALF_FACTORS = {
    "space_category": lambda c: c.space_category.value,
    "health_category": lambda c: str(c.health_category),
    "bedding_score": lambda c: str(c.bedding_score),
}
_CALF_COVARIATES = {
    "age_days": lambda c: float(c.age_days),
    "space_m2": lambda c: c.space_m2,
    "group_size": lambda c: float(c.group_size),
    "milk_l_day": lambda c: c.milk_l_day,
}


def _split_names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def cmd_fit_lmm(cfg: PipelineConfig) -> dict:
    _require(cfg, "fit-lmm")
    calves_path = Path(cfg.get("paths.calves") or cfg.input_dir / "calves.csv")
    if not calves_path.exists():
        raise CalfplayError(f"fit-lmm needs calf records; {calves_path} not found")
    calves = {(c.farm_id, c.calf_id): c for c in read_calf_records(calves_path)}
    response = cfg.get("lmm.response")
    summary_path = cfg.output_dir / "metrics" / "play_summary.csv"
    with open(summary_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if response not in (reader.fieldnames or ()):
            raise CalfplayError(f"response {response!r} is not a column of {summary_path}")
        rows = [r for r in reader]
    factors, covariates = _split_names(cfg.get("lmm.factors")), _split_names(cfg.get("lmm.covariates"))
    for name in factors:
        if name not in _CALF_FACTORS:
            raise CalfplayError(f"unknown factor {name!r}; choose from {sorted(_CALF_FACTORS)}")
    for name in covariates:
        if name not in _CALF_COVARIATES:
            raise CalfplayError(f"unknown covariate {name!r}; choose from {sorted(_CALF_COVARIATES)}")

    used, missing = [], []
    for r in rows:
        calf = calves.get((r["farm_id"], r["calf_id"]))
        (used if calf else missing).append((r, calf))
    if missing:
        log.warning("%d calves without records left out of the model", len(missing))
    y = [float(r[response]) for r, _ in used]
    groups = [c.farm_id for _, c in used]
    spec = LmmSpec(
        response=y,
        groups=groups,
        factors={n: [_CALF_FACTORS[n](c) for _, c in used] for n in factors},
        covariates={n: [_CALF_COVARIATES[n](c) for _, c in used] for n in covariates},
        levels={"space_category": [s.value for s in SpaceCategory]},
    )
    method = cfg.get("lmm.method")
    fit = fit_random_intercept(spec, method=method)
    null_fit = fit_random_intercept(LmmSpec(y, groups), method=method)

    report: dict[str, Any] = {
        "provenance": cfg.provenance("fit-lmm"),
        "response": response,
        "method": method,
        "n_obs": fit.n_obs,
        "n_groups": fit.n_groups,
        "calves_without_records": len(missing),
        "coefficients": [{"name": n, "estimate": float(b), "se": float(s)}
                         for n, b, s in zip(fit.names, fit.beta, fit.se)],
        "sigma2_farm": fit.sigma2_farm,
        "sigma2_resid": fit.sigma2_resid,
        "icc": icc(fit),
        "r_squared": r_squared(fit),
        "loglik": fit.loglik,
        "n_params": fit.n_params,
        **information_criteria(fit),
        "null_model": {"loglik": null_fit.loglik, **information_criteria(null_fit)},
    }
    if method == "ml":
        report["lr_test_vs_null"] = lr_test(fit, null_fit)
    report["wald"] = {f: wald_test(fit, f) for f in factors if fit.design.factor_columns.get(f)}
    lsd = {}
    for f in factors:
        if len(fit.design.factor_levels[f]) < 2:
            continue
        lsd[f] = {
            "adjusted_means": {str(k): {"mean": m, "se": se} for k, (m, se) in adjusted_means(fit, f).items()},
            "comparisons": [dataclasses.asdict(c) for c in lsd_pairwise(fit, f)],
        }
    report["lsd"] = lsd
    if factors:
        try:
            report["levene"] = levene_brown_forsythe(fit.std_residuals, spec.factors[factors[0]])
        except CalfplayError as exc:
            report["levene"] = {"skipped": str(exc)}

    out = _stage_dir(cfg, "fit-lmm")
    _write_json(out / "model.json", report)
    (out / "model.txt").write_text(_lmm_text(report), encoding="utf-8")

    def write_resid(buf):
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["farm_id", "calf_id", "observed", "fitted", "residual", "std_residual"])
        for (r, c), obs, fv, res, sr in zip(used, fit.y, fit.fitted, fit.residuals, fit.std_residuals):
            w.writerow([c.farm_id, c.calf_id, repr(float(obs)), repr(float(fv)), repr(float(res)), repr(float(sr))])

    _write_table(out / "residuals.csv", write_resid, cfg.provenance("fit-lmm"))
    _mark_done(cfg, "fit-lmm")
    return report


def _lmm_text(rep: dict) -> str:
    lines = [f"response: {rep['response']} ({rep['method'].upper()}, {rep['n_obs']} calves, {rep['n_groups']} farms)",
             "", f"{'term':<28}{'estimate':>12}{'se':>12}"]
    for c in rep["coefficients"]:
        lines.append(f"{c['name']:<28}{c['estimate']:>12.5f}{c['se']:>12.5f}")
    lines += [
        "",
        f"farm variance      {rep['sigma2_farm']:.6g}",
        f"residual variance  {rep['sigma2_resid']:.6g}",
        f"ICC                {rep['icc']:.4f}",
        f"R2 marginal        {rep['r_squared']['marginal']:.4f}",
        f"R2 conditional     {rep['r_squared']['conditional']:.4f}",
        f"log-likelihood     {rep['loglik']:.4f}",
        f"AIC / BIC          {rep['aic']:.3f} / {rep['bic']:.3f}",
    ]
    if "lr_test_vs_null" in rep:
        t = rep["lr_test_vs_null"]
        lines.append(f"LR test vs null    chi2={t['chi2']:.4f} df={t['df']} p={t['p']:.4g}")
    for f, block in rep["lsd"].items():
        lines += ["", f"LSD comparisons for {f}:"]
        for c in block["comparisons"]:
            lines.append(f"  {c['level_a']} vs {c['level_b']}: diff={c['difference']:.5f} "
                         f"se={c['se']:.5f} t={c['t']:.3f} p={c['p']:.4g}")
    return "\n".join(lines) + "\n"


# -- prepare / train / evaluate -------------------------------------------

def _resolve(cfg: PipelineConfig, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else cfg.input_dir / p


def cmd_prepare(cfg: PipelineConfig) -> dict:
    _require(cfg, "prepare")
    eligible = read_metadata_table(cfg.output_dir / "filter" / "eligible.csv")
    rows = [(s.embedding_path, class_of(s.final_label)) for s in eligible]
    rows = [r for r in rows if r[1] is not None]
    labels = [c for _, c in rows]
    seed = cfg.get("prepare.seed")
    chosen = stratified_downsample(labels, seed)
    balanced = [rows[int(i)] for i in chosen]
    splits = stratified_split([c for _, c in balanced], cfg.fractions(), seed)
    load_embeddings([_resolve(cfg, p) for p, _ in balanced], jobs=cfg.jobs)  # validate before committing
    manifest = [ManifestRow(p, c, s) for (p, c), s in zip(balanced, splits)]
    out = _stage_dir(cfg, "prepare")
    prov = cfg.provenance("prepare", seed)
    _write_table(out / "manifest.csv", lambda buf: write_manifest(manifest, buf), prov)
    counts = {s: {c: 0 for c in CLASSES} for s in ("train", "val", "test")}
    for r in manifest:
        counts[r.split][r.label] += 1
    report = {"provenance": prov, "eligible": len(rows), "balanced": len(manifest),
              "per_class": len(manifest) // len(CLASSES), "splits": counts}
    _write_json(out / "report.json", report)
    _mark_done(cfg, "prepare", seed)
    return report


def _load_split(cfg: PipelineConfig, rows: list[ManifestRow], split: str) -> tuple[np.ndarray, np.ndarray]:
    chosen = [r for r in rows if r.split == split]
    x = load_embeddings([_resolve(cfg, r.embedding_path) for r in chosen], jobs=cfg.jobs)
    y = np.array([CLASSES.index(r.label) for r in chosen], dtype=np.int64)
    return x, y


def cmd_train(cfg: PipelineConfig) -> dict:
    _require(cfg, "train")
    rows = read_manifest(cfg.output_dir / "prepare" / "manifest.csv")
    x_tr, y_tr = _load_split(cfg, rows, "train")
    x_va, y_va = _load_split(cfg, rows, "val")
    if len(x_tr) == 0 or len(x_va) == 0:
        raise CalfplayError("train needs non-empty train and val splits; check prepare.fractions")
    tcfg = cfg.train_config()
    prov = cfg.provenance("train", tcfg.seed)
    out = _stage_dir(cfg, "train")
    with open(out / "run_log.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        result = train(x_tr, y_tr, x_va, y_va, tcfg, log_stream=fh, provenance=prov)
    save_checkpoint(out / "checkpoint.bin", result.params, dataclasses.asdict(tcfg), prov)
    report = {"provenance": prov, "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
              "epochs_run": result.epochs_run}
    _write_json(out / "report.json", report)
    _mark_done(cfg, "train", tcfg.seed)
    return report


def cmd_evaluate(cfg: PipelineConfig) -> dict:
    _require(cfg, "evaluate")
    params, header = load_checkpoint(cfg.output_dir / "train" / "checkpoint.bin")
    rows = read_manifest(cfg.output_dir / "prepare" / "manifest.csv")
    x, y = _load_split(cfg, rows, "test")
    if len(x) == 0:
        raise CalfplayError("test split is empty; check prepare.fractions")
    rep = evaluate(params, x, y, CLASSES)
    seed = header.get("provenance", {}).get("seed")
    out = _stage_dir(cfg, "evaluate")
    payload = {"provenance": cfg.provenance("evaluate", seed), **rep.to_dict()}
    _write_json(out / "report.json", payload)
    (out / "report.txt").write_text(rep.to_text(), encoding="utf-8")
    _mark_done(cfg, "evaluate", seed)
    return payload


# -- report ----------------------------------------------------------------

def cmd_report(cfg: PipelineConfig) -> dict:
    _require(cfg, "report")
    sections: dict[str, Any] = {}
    for stage, name in (("ingest", "report.json"), ("align", "report.json"), ("filter", "report.json"),
                        ("metrics", "report.json"), ("fit-lmm", "model.json"), ("prepare", "report.json"),
                        ("train", "report.json"), ("evaluate", "report.json")):
        path = cfg.output_dir / stage / name
        if _status_file(cfg, stage).exists() and path.exists():
            sections[stage] = json.loads(path.read_text(encoding="utf-8"))
    lines = [f"calfplay {__version__} report (config {cfg.config_hash()})", ""]
    ing = sections["ingest"]
    lines.append(f"ingest: {ing['files']} event logs, "
                 f"{sum(v['intervals'] for v in ing['videos'])} behaviour intervals")
    for v in ing["videos"]:
        if "ocr" in v:
            lines.append(f"  {v['video']}: OCR success {v['ocr']['success_rate_pct']:.1f}% "
                         f"({v['ocr']['successful']}/{v['ocr']['total_frames']}), repaired {v['ocr']['repaired']}")
    if "align" in sections:
        a = sections["align"]
        lines.append(f"align: {a['samples']} labelled frames " +
                     ", ".join(f"{k}={n}" for k, n in a["final_labels"].items()))
    if "filter" in sections:
        f = sections["filter"]
        lines.append(f"filter: {f['eligible']} training-eligible of {f['input']} "
                     f"(low confidence {f['low_confidence']}, " +
                     ", ".join(f"{k} {n}" for k, n in f["excluded"].items()) + ")")
    if "metrics" in sections and "percent_op_total" in sections["metrics"]:
        d = sections["metrics"]["percent_op_total"]
        sd = "n/a" if d["sd"] is None else f"{d['sd']:.3f}"
        lines.append(f"metrics: {sections['metrics']['calves']} calves, %OP mean {d['mean']:.3f} "
                     f"(sd {sd}, range {d['min']:.3f}-{d['max']:.3f})")
    if "fit-lmm" in sections:
        m = sections["fit-lmm"]
        lines.append(f"fit-lmm: ICC {m['icc']:.3f}, marginal R2 {m['r_squared']['marginal']:.3f}, "
                     f"AIC {m['aic']:.2f}")
    if "prepare" in sections:
        p = sections["prepare"]
        lines.append(f"prepare: {p['balanced']} balanced samples ({p['per_class']} per class)")
    if "train" in sections:
        t = sections["train"]
        lines.append(f"train: best epoch {t['best_epoch']} of {t['epochs_run']}, val loss {t['best_val_loss']:.4f}")
    if "evaluate" in sections:
        e = sections["evaluate"]
        lines.append(f"evaluate: test accuracy {e['accuracy']:.4f}")
    text = "\n".join(lines) + "\n"
    (cfg.output_dir / "report.txt").write_text(text, encoding="utf-8")
    payload = {"provenance": cfg.provenance("report"), "stages": sorted(sections)}
    _write_json(cfg.output_dir / "report.json", payload)
    return payload


COMMANDS: dict[str, Callable[[PipelineConfig], dict]] = {
    "ingest": cmd_ingest,
    "align": cmd_align,
    "filter": cmd_filter,
    "metrics": cmd_metrics,
    "fit-lmm": cmd_fit_lmm,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}
