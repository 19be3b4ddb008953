"""Embedding loading, class balancing and stratified train/val/test splits.

Randomness comes from numpy's ``default_rng`` (PCG64) seeded with the given
integer; given the algorithm description below and the seed, the selection
is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import IO, Iterable, Sequence

import networkx as nx
import numpy as np

from .alignment import FinalLabel
from .errors import EmbeddingDataError, EmbeddingFormatError, RowError, SchemaError

EMBEDDING_DIM = 1024
CLASSES = ("ActivePlaying", "NonActivePlaying", "NotPlaying")
SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)
MANIFEST_COLUMNS = ("embedding_path", "class", "split")
_NPY_MAGIC = b"\x93NUMPY"

_CLASS_OF_LABEL = {
    FinalLabel.ACTIVE_PLAYING: "ActivePlaying",
    FinalLabel.NON_ACTIVE_PLAYING: "NonActivePlaying",
    FinalLabel.NOT_PLAYING: "NotPlaying",
}


def class_of(label: FinalLabel) -> str | None:
    """Training class for a final label; None for labels kept out of training."""
    return _CLASS_OF_LABEL.get(label)


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    source: str

    def __post_init__(self) -> None:
        if self.values.shape != (EMBEDDING_DIM,):
            raise EmbeddingFormatError(f"{self.source}: expected {EMBEDDING_DIM} values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise EmbeddingDataError(f"{self.source}: non-finite component")


def load_embedding(path: str | Path) -> EmbeddingVector:
    """Read raw little-endian float32 x 1024, or a ``.npy`` file of the same size."""
    data = Path(path).read_bytes()
    if data.startswith(_NPY_MAGIC):
        with open(path, "rb") as fh:
            try:
                arr = np.load(fh, allow_pickle=False)
            except ValueError as exc:
                raise EmbeddingFormatError(f"{path}: {exc}") from None
        if arr.dtype.kind != "f":
            raise EmbeddingFormatError(f"{path}: dtype {arr.dtype} is not floating point")
        values = arr.astype("<f4").reshape(-1)
        if values.size != EMBEDDING_DIM:
            raise EmbeddingFormatError(f"{path}: expected {EMBEDDING_DIM} values, got {values.size}")
    else:
        if len(data) != 4 * EMBEDDING_DIM:
            raise EmbeddingFormatError(
                f"{path}: {len(data)} bytes is not {EMBEDDING_DIM} float32 values ({len(data) / 4:g} values)")
        values = np.frombuffer(data, dtype="<f4").copy()
    return EmbeddingVector(values, str(path))


def load_embeddings(paths: Sequence[str | Path], jobs: int = 1) -> np.ndarray:
    """Stack embeddings into an ``(n, 1024)`` float32 array, in input order."""
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            vecs = list(pool.map(load_embedding, paths))
    else:
        vecs = [load_embedding(p) for p in paths]
    if not vecs:
        return np.zeros((0, EMBEDDING_DIM), dtype=np.float32)
    return np.stack([v.values for v in vecs]).astype(np.float32)


def write_embedding(path: str | Path, values: Sequence[float]) -> None:
    arr = np.asarray(values, dtype="<f4")
    if arr.shape != (EMBEDDING_DIM,):
        raise EmbeddingFormatError(f"expected {EMBEDDING_DIM} values, got {arr.shape}")
    Path(path).write_bytes(arr.tobytes())


def _class_indices(labels: Sequence[str]) -> dict[str, list[int]]:
    by_class = {c: [] for c in CLASSES}
    for i, lab in enumerate(labels):
        if lab not in by_class:
            raise ValueError(f"unknown class {lab!r}; expected one of {CLASSES}")
        by_class[lab].append(i)
    return by_class


def stratified_downsample(labels: Sequence[str], seed: int) -> np.ndarray:
    """Indices of a class-balanced, shuffled subset.

    For each class in ``CLASSES`` order, ``rng.choice`` draws the minority
    count without replacement; the concatenation is then permuted with the
    same generator.
    """
    by_class = _class_indices(labels)
    empty = [c for c, idx in by_class.items() if not idx]
    if empty:
        raise ValueError(f"cannot balance: no samples for {', '.join(empty)}")
    m = min(len(idx) for idx in by_class.values())
    rng = np.random.default_rng(seed)
    chosen = [rng.choice(np.asarray(by_class[c]), size=m, replace=False) for c in CLASSES]
    return rng.permutation(np.concatenate(chosen))


def largest_remainder(total: int, fractions: Sequence[Fraction]) -> list[int]:
    """Integer shares of ``total`` proportional to ``fractions`` summing to ``total``."""
    quotas = [total * f for f in fractions]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda k: (-(quotas[k] - counts[k]), k))
    for k in order[: total - sum(counts)]:
        counts[k] += 1
    return counts


def _to_fractions(fractions: Sequence[float]) -> list[Fraction]:
    if len(fractions) != len(SPLITS):
        raise ValueError(f"need {len(SPLITS)} fractions, got {len(fractions)}")
    fr = [Fraction(str(f)) for f in fractions]
    if any(f < 0 for f in fr):
        raise ValueError("split fractions must be non-negative")
    if abs(float(sum(fr)) - 1.0) > 1e-9:
        raise ValueError(f"split fractions sum to {float(sum(fr))}, not 1")
    total = sum(fr)
    return [f / total for f in fr]


def split_counts(class_counts: dict[str, int], fractions: Sequence[float] = DEFAULT_FRACTIONS) -> dict[str, list[int]]:
    """Per-class split sizes.

    Split totals come from largest-remainder rounding of the whole set; each
    cell is then the floor or ceiling of its quota, chosen by a min-cost flow
    that favours the largest remainders while meeting both the class sizes
    and the split totals (a controlled rounding of the class x split table).
    """
    fr = _to_fractions(fractions)
    classes = [c for c in class_counts if class_counts[c] > 0]
    totals = largest_remainder(sum(class_counts[c] for c in classes), fr)
    quota = {c: [class_counts[c] * f for f in fr] for c in classes}
    cells = {c: [math.floor(q) for q in quota[c]] for c in classes}

    g = nx.DiGraph()
    demand = 0
    for c in classes:
        extra = class_counts[c] - sum(cells[c])
        demand += extra
        g.add_edge("source", ("class", c), capacity=extra, weight=0)
        for s, q in enumerate(quota[c]):
            rem = q - cells[c][s]
            if rem > 0:
                g.add_edge(("class", c), ("split", s), capacity=1, weight=-int(rem * 10**6))
    for s in range(len(fr)):
        short = totals[s] - sum(cells[c][s] for c in classes)
        g.add_edge(("split", s), "sink", capacity=short, weight=0)
    if demand:
        flow = nx.max_flow_min_cost(g, "source", "sink")
        if sum(flow["source"].values()) != demand:
            raise RuntimeError("controlled rounding failed to meet class and split totals")
        for c in classes:
            for node, units in flow[("class", c)].items():
                cells[c][node[1]] += units
    return {c: cells.get(c, [0] * len(fr)) for c in class_counts}


def stratified_split(labels: Sequence[str], fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0) -> list[str]:
    """Split name for every sample, stratified by class.

    Within each class (in ``CLASSES`` order) the member positions are
    permuted by the seeded generator and handed out train, val, test in
    the sizes given by :func:`split_counts`.
    """
    by_class = _class_indices(labels)
    sizes = split_counts({c: len(idx) for c, idx in by_class.items()}, fractions)
    rng = np.random.default_rng(seed)
    out = [""] * len(labels)
    for c in CLASSES:
        idx = np.asarray(by_class[c], dtype=np.int64)
        perm = idx[rng.permutation(len(idx))] if len(idx) else idx
        start = 0
        for s, n in zip(SPLITS, sizes[c]):
            for i in perm[start:start + n]:
                out[int(i)] = s
            start += n
    return out


@dataclass(frozen=True)
class ManifestRow:
    embedding_path: str
    label: str
    split: str


def write_manifest(rows: Iterable[ManifestRow], stream: IO[str]) -> int:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    n = 0
    for r in rows:
        writer.writerow([r.embedding_path, r.label, r.split])
        n += 1
    return n


def read_manifest(source: IO[str] | str | Path, source_name: str | None = None) -> list[ManifestRow]:
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_manifest(fh, source_name or str(source))
    name = source_name or "<stream>"
    reader = csv.DictReader(source)
    for column in MANIFEST_COLUMNS:
        if column not in (reader.fieldnames or ()):
            raise SchemaError(column, name)
    rows = []
    for row in reader:
        if row["class"] not in CLASSES:
            raise RowError(f"unknown class {row['class']!r}", name, reader.line_num)
        if row["split"] not in SPLITS:
            raise RowError(f"unknown split {row['split']!r}", name, reader.line_num)
        rows.append(ManifestRow(row["embedding_path"], row["class"], row["split"]))
    return rows
