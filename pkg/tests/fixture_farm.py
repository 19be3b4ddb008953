"""Synthetic three-farm input directory for end-to-end pipeline tests.

FarmA's frames carry only frame indices; their times come from a 1 fps
burned-in clock read by OCR, with a few confusable characters and one
unreadable frame.  FarmB and FarmC frames have explicit millisecond
timestamps at 2 fps.  Embeddings are class-dependent Gaussian vectors so a
classifier can learn something.
"""

from __future__ import annotations

import csv
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

VIDEO_SECONDS = 60
N_CALVES = 4
START = datetime(2024, 6, 15, 6, 0, 0)
FARMS = {
    # farm: (fps, uses_ocr, space per calf for Calf1..Calf4)
    "FarmA": (1, True, (3.2, 5.0, 9.0, 5.5)),
    "FarmB": (2, False, (4.5, 8.8, 3.0, 9.5)),
    "FarmC": (2, False, (9.9, 3.5, 4.1, 8.2)),
}
CLASS_MEANS_SEED = 99


def _bouts(calf: int) -> list[tuple[str, float, float]]:
    bouts = [
        ("Gallop", 5.0 + calf, 15.0 + calf),
        ("Straw dig", 20.0, 28.0 + calf),
        ("Out of view", 32.0, 39.0 if calf == 1 else 34.0),
        ("Brush interaction", 46.0, 50.0 + 0.5 * calf),
    ]
    if calf == 2:
        bouts.append(("Management", 40.0, 43.0))
    if calf == 3:
        bouts.append(("Frontal push", 8.0, 12.0))
    return bouts


def _class_at(calf: int, t: float) -> str | None:
    active = [b for b, s, e in _bouts(calf) if s <= t < e]
    if "Management" in active or "Out of view" in active:
        return None
    if "Gallop" in active or "Frontal push" in active:
        return "ActivePlaying"
    if active:
        return "NonActivePlaying"
    return "NotPlaying"


def _fmt_time(seconds: float) -> str:
    return f"{seconds:.1f}"


def _write_events(path: Path) -> None:
    rows = []
    for calf in range(1, N_CALVES + 1):
        for behaviour, start, stop in _bouts(calf):
            rows.append((start, f"Calf{calf}", behaviour, "State start", "-"))
            rows.append((stop, f"Calf{calf}", behaviour, "State stop", f"{stop - start:.1f}"))
    rows.sort(key=lambda r: (r[0], r[1], r[3] != "State stop", r[2]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Subject", "Behaviour", "Modifier", "Event_Type", "Time_Relative_sf", "Duration"])
        for t, subject, behaviour, etype, duration in rows:
            w.writerow([subject, behaviour, "-", etype, _fmt_time(t), duration])


def make_farm(root: str | Path, seed: int = 7) -> Path:
    """Write the fixture input tree under ``root`` and return it."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    means = np.random.default_rng(CLASS_MEANS_SEED).normal(0, 1, size=(3, 1024))
    class_index = {"ActivePlaying": 0, "NonActivePlaying": 1, "NotPlaying": 2}
    for sub in ("events", "frames", "ocr"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    calves = []
    for farm, (fps, uses_ocr, spaces) in FARMS.items():
        stem = f"{farm}_ch01_{START:%Y%m%d_%H%M%S}"
        _write_events(root / "events" / f"{stem}.csv")
        emb_dir = root / "embeddings" / stem
        emb_dir.mkdir(parents=True, exist_ok=True)
        n_frames = VIDEO_SECONDS * fps
        if uses_ocr:
            with open(root / "ocr" / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["frame_index", "raw_string"])
                for k in range(n_frames):
                    text = (START + timedelta(seconds=k / fps)).strftime("%Y-%m-%d %H:%M:%S")
                    if k % 11 == 3:
                        text = text[:11] + "O" + text[12:]  # hour tens digit read as a letter
                    if k == 25:
                        text = "####-##-## ##:##:##"
                    w.writerow([k, text])
        with open(root / "frames" / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", "frame_index", "tracking_id", "x", "y", "w", "h", "confidence",
                        "mean_intensity", "occlusion_fraction", "mask_area", "crop_path", "embedding_path"])
            for k in range(n_frames):
                t = k / fps
                ts = "" if uses_ocr else (START + timedelta(seconds=t)).strftime("%Y-%m-%dT%H:%M:%S.%f")[:-3] + "Z"
                for calf in range(1, N_CALVES + 1):
                    bw, bh = rng.uniform(150, 260, size=2)
                    conf = rng.uniform(0.6, 0.95)
                    inten = rng.uniform(60, 200)
                    occ = rng.uniform(0.0, 0.3)
                    mask = bw * bh * rng.uniform(0.6, 0.9)
                    roll = rng.random()
                    if roll < 0.03:
                        conf = 0.3
                    elif roll < 0.05:
                        bw = 80.0
                    elif roll < 0.07:
                        inten = 20.0
                    elif roll < 0.09:
                        occ = 0.7
                    elif roll < 0.10:
                        mask = bw * bh * 3.0
                    name = f"{calf}_{k:04d}"
                    emb_rel = f"embeddings/{stem}/{name}.f32"
                    label = _class_at(calf, t)
                    centre = means[class_index[label]] if label else np.zeros(1024)
                    vec = (centre + rng.normal(0, 1.0, size=1024)).astype("<f4")
                    (root / emb_rel).write_bytes(vec.tobytes())
                    w.writerow([ts, k, calf, f"{rng.uniform(0, 1000):.1f}", f"{rng.uniform(0, 600):.1f}",
                                f"{bw:.1f}", f"{bh:.1f}", f"{conf:.3f}", f"{inten:.1f}", f"{occ:.3f}",
                                f"{mask:.1f}", f"crops/{stem}/{name}.jpg", emb_rel])
        for calf in range(1, N_CALVES + 1):
            calves.append([f"Calf{calf}", farm, int(rng.integers(20, 90)), int(rng.integers(1, 3)),
                           spaces[calf - 1], 8, 8.0, 2])

    with open(root / "calves.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["calf_id", "farm_id", "age_days", "health_category", "space_m2", "group_size",
                    "milk_l_day", "bedding_score"])
        w.writerows(calves)
    (root / "pipeline.ini").write_text(
        "[ingest]\nnominal_fps = 1\n\n[prepare]\nseed = 11\n\n[train]\nseed = 5\nmax_epochs = 12\n",
        encoding="utf-8",
    )
    return root
