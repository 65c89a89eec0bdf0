"""Chunk series -> model-ready segments.

Order of operations follows the training protocol: split the flat rows
80:20 without shuffling, group by pump, drop short pumps (train only),
window each pump, undersample all-negative windows (train only), then
shuffle and batch.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidFraction, InvalidSegmentLength, InvalidSpec
from .ingest import COL, FEATURE_COLUMNS, ChunkFeatures, ChunkSeries, time_encodings
from .rng import substream

CACHE_VERSION = 1
DEFAULT_MASK = ("Date", "PumpIndex", "Symbol")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    shuffled: bool = False

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise InvalidFraction(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.shuffled:
            raise InvalidSpec("shuffled splits are not supported; the split is chronological")


@dataclass
class PumpSeries:
    pump_index: int
    series: ChunkSeries

    def __len__(self):
        return len(self.series)

    @property
    def rows(self) -> list[ChunkFeatures]:
        return self.series.rows


@dataclass(frozen=True)
class Segment:
    window: np.ndarray  # (s, 15)
    label: int
    pump_index: int
    position: int


@dataclass
class SegmentSet:
    """Columnar collection of segments.

    X: (n, s, 15) windows; y: (n,) last-chunk labels; window_labels: (n, s);
    pump: (n,) pump ids; position: (n,) index of the last chunk within its
    pump; dates: (n,) Date of the last chunk.
    """

    X: np.ndarray
    y: np.ndarray
    window_labels: np.ndarray
    pump: np.ndarray
    position: np.ndarray
    dates: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i) -> Segment:
        return Segment(self.X[i], int(self.y[i]), int(self.pump[i]), int(self.position[i]))

    def __iter__(self) -> Iterator[Segment]:
        return (self[i] for i in range(len(self)))

    @property
    def segment_length(self) -> int:
        return self.X.shape[1]

    @property
    def has_positive(self) -> np.ndarray:
        return self.window_labels.any(axis=1)

    def take(self, index) -> "SegmentSet":
        return SegmentSet(
            self.X[index], self.y[index], self.window_labels[index],
            self.pump[index], self.position[index], self.dates[index],
        )

    @classmethod
    def empty(cls, s: int, width: int = len(FEATURE_COLUMNS)) -> "SegmentSet":
        return cls(
            np.zeros((0, s, width)), np.zeros(0, np.int64), np.zeros((0, s), np.int64),
            np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0),
        )

    @classmethod
    def concat(cls, parts: Sequence["SegmentSet"], s: int) -> "SegmentSet":
        if not parts:
            return cls.empty(s)
        return cls(
            np.concatenate([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.window_labels for p in parts]),
            np.concatenate([p.pump for p in parts]),
            np.concatenate([p.position for p in parts]),
            np.concatenate([p.dates for p in parts]),
        )


def split_train_val(series: ChunkSeries, spec: SplitSpec = SplitSpec()) -> tuple[ChunkSeries, ChunkSeries]:
    n = len(series)
    cut = int(math.floor(n * spec.train_fraction + 1e-9))
    if cut == 0:
        warnings.warn(f"train split is empty for a {n}-row series", stacklevel=2)
    return series.take(slice(0, cut)), series.take(slice(cut, n))


def group_by_pump(series: ChunkSeries) -> list[PumpSeries]:
    ids = series.pump_index
    order = list(dict.fromkeys(ids.tolist()))
    return [PumpSeries(p, series.take(np.flatnonzero(ids == p))) for p in order]


def group_and_filter(series: ChunkSeries, min_chunks: int = 100, apply_filter: bool = False) -> list[PumpSeries]:
    """One group per pump id in order of first appearance; optionally drop pumps shorter than ``min_chunks``."""
    groups = group_by_pump(series)
    if apply_filter:
        groups = [g for g in groups if len(g) >= min_chunks]
    return groups


def reflect_index(i: int, m: int) -> int:
    """Map any integer onto 0..m-1 by mirroring about both ends without repeating the edge."""
    if m == 1:
        return 0
    period = 2 * (m - 1)
    j = abs(i) % period
    return period - j if j >= m else j


def window_indices(n: int, s: int) -> np.ndarray:
    """(n, s) row indices of the window ending at each chunk.

    Windows that would start before row 0 are completed by reflecting
    inside the rows seen so far (0..k), so no window ever reads a chunk
    after its own last chunk.
    """
    if s < 1:
        raise InvalidSegmentLength(f"segment length must be >= 1, got {s}")
    out = np.arange(n)[:, None] + (np.arange(s) - (s - 1))[None, :]
    head = min(n, s - 1)
    if head:
        raw = out[:head]
        m = np.arange(1, head + 1)[:, None]  # rows visible to window k
        period = np.maximum(2 * (m - 1), 1)
        j = np.abs(raw) % period
        j = np.where(j >= m, period - j, j)
        out[:head] = np.where(m == 1, 0, j)
    return out


def segment(pump: PumpSeries | ChunkSeries, s: int) -> SegmentSet:
    series = pump.series if isinstance(pump, PumpSeries) else pump
    if s < 1:
        raise InvalidSegmentLength(f"segment length must be >= 1, got {s}")
    n = len(series)
    if n == 0:
        return SegmentSet.empty(s)
    idx = window_indices(n, s)
    return SegmentSet(
        X=series.data[idx],
        y=series.labels.copy(),
        window_labels=series.labels[idx],
        pump=series.pump_index.copy(),
        position=np.arange(n, dtype=np.int64),
        dates=series.dates.copy(),
    )


def segment_all(pumps: Sequence[PumpSeries], s: int) -> SegmentSet:
    return SegmentSet.concat([segment(p, s) for p in pumps], s)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def undersample(segments: SegmentSet, u: float, seed: int | np.random.Generator) -> SegmentSet:
    """Keep every window containing a positive chunk plus round(u * N_neg) all-negative windows.

    Negatives are drawn uniformly without replacement; kept segments keep
    their relative order.
    """
    if not 0 < u <= 1:
        raise InvalidFraction(f"undersampling fraction must be in (0, 1], got {u}")
    if u == 1:
        return segments
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, "undersample")
    pos = segments.has_positive
    neg_idx = np.flatnonzero(~pos)
    n_keep = _round_half_up(u * len(neg_idx))
    chosen = rng.choice(neg_idx, size=n_keep, replace=False) if n_keep else np.zeros(0, np.int64)
    keep = pos.copy()
    keep[chosen] = True
    return segments.take(np.flatnonzero(keep))


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    if batch_size < 1:
        raise InvalidSpec("batch_size must be >= 1")
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def batch(segments: SegmentSet, batch_size: int, shuffle_seed: int) -> list[SegmentSet]:
    rng = substream(shuffle_seed, "shuffle")
    return [segments.take(ix) for ix in batch_indices(len(segments), batch_size, rng)]


def mask_columns(X: np.ndarray, columns: Sequence[str]) -> np.ndarray:
    """Zero the named feature columns (copy)."""
    X = np.array(X, dtype=np.float64, copy=True)
    for c in columns:
        if c not in COL:
            raise InvalidSpec(f"unknown feature column {c!r}")
        X[..., COL[c]] = 0.0
    return X


# --- synthetic fixture ----------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    n_pumps: int = 5
    pump_len: int = 2000
    anomaly_len: int = 40
    noise_scale: float = 1.0
    amplitude: float = 10.0  # anomaly lift in units of noise_scale
    chunk_size: int = 15
    start: int = 1_600_000_000

    def validate(self):
        if self.n_pumps < 1 or self.pump_len < 1:
            raise InvalidSpec("n_pumps and pump_len must be >= 1")
        if not 0 <= self.anomaly_len < self.pump_len:
            raise InvalidSpec("need 0 <= anomaly_len < pump_len")
        if self.noise_scale <= 0:
            raise InvalidSpec("noise_scale must be > 0")
        if self.amplitude < 5:
            raise InvalidSpec("amplitude must be >= 5 (anomalies sit at least 5 noise scales above baseline)")


_STD_COLS = [COL[c] for c in ("StdRushOrder", "StdTrades", "StdVolume", "StdPrice")]
_AVG_COLS = [COL[c] for c in ("AvgRushOrder", "AvgVolume", "AvgPrice", "AvgPriceMax")]
_ANOMALY_COLS = [COL[c] for c in ("StdPrice", "AvgPrice", "StdVolume", "AvgVolume")]


def synthesize(spec: SynthSpec, seed: int) -> ChunkSeries:
    """Seeded pumps of noise with one contiguous labelled anomaly each."""
    spec.validate()
    rng = substream(seed, "synth")
    n, L = spec.n_pumps, spec.pump_len
    data = np.zeros((n * L, len(FEATURE_COLUMNS)))
    labels = np.zeros(n * L, dtype=np.int64)
    for p in range(n):
        rows = slice(p * L, (p + 1) * L)
        t0 = spec.start + p * (L * spec.chunk_size + 3600)
        dates = t0 + np.arange(L, dtype=np.float64) * spec.chunk_size
        block = data[rows]
        block[:, COL["Date"]] = dates
        block[:, COL["HourSin"] : COL["MinuteCos"] + 1] = time_encodings(dates)
        block[:, COL["PumpIndex"]] = p
        block[:, COL["Symbol"]] = p
        block[:, _STD_COLS] = np.abs(rng.normal(0.0, spec.noise_scale, (L, len(_STD_COLS))))
        block[:, _AVG_COLS] = rng.normal(0.0, spec.noise_scale, (L, len(_AVG_COLS)))
        start = int(rng.integers(0, L - spec.anomaly_len + 1))
        if spec.anomaly_len:
            span = slice(start, start + spec.anomaly_len)
            block[span, _ANOMALY_COLS] += spec.amplitude * spec.noise_scale
            labels[p * L + start : p * L + start + spec.anomaly_len] = 1
    return ChunkSeries(spec.chunk_size, data, labels, [f"SYN{p}" for p in range(n)])


# --- full preparation + cache ---------------------------------------------------------

@dataclass
class PreparedData:
    """Train segments (filtered, not yet undersampled) and untouched validation segments."""

    train: SegmentSet
    val: SegmentSet
    config_hash: str
    meta: dict = field(default_factory=dict)


def prepare_train(series: ChunkSeries, s: int, min_chunks: int, masked: Sequence[str]) -> SegmentSet:
    segs = segment_all(group_and_filter(series, min_chunks, apply_filter=True), s)
    segs.X = mask_columns(segs.X, masked)
    return segs


def prepare_validation(series: ChunkSeries, s: int, masked: Sequence[str]) -> SegmentSet:
    """Validation windows: no pump filtering, no undersampling."""
    segs = segment_all(group_and_filter(series, apply_filter=False), s)
    segs.X = mask_columns(segs.X, masked)
    return segs


def prepare(
    series: ChunkSeries,
    s: int = 15,
    split: SplitSpec = SplitSpec(),
    min_chunks: int = 100,
    masked: Sequence[str] = DEFAULT_MASK,
    config_hash: str = "",
) -> PreparedData:
    train_rows, val_rows = split_train_val(series, split)
    meta = {
        "segment_length": s,
        "chunk_size": series.chunk_size,
        "train_fraction": split.train_fraction,
        "min_chunks": min_chunks,
        "masked_columns": list(masked),
        "train_rows": len(train_rows),
        "val_rows": len(val_rows),
    }
    return PreparedData(
        prepare_train(train_rows, s, min_chunks, masked),
        prepare_validation(val_rows, s, masked),
        config_hash,
        meta,
    )


def save_prepared(data: PreparedData, path) -> Path:
    path = Path(path)
    arrays = {}
    for split_name, segs in (("train", data.train), ("val", data.val)):
        for f in ("X", "y", "window_labels", "pump", "position", "dates"):
            arrays[f"{split_name}/{f}"] = getattr(segs, f)
    header = {"version": CACHE_VERSION, "config_hash": data.config_hash, "meta": data.meta}
    arrays["__meta__"] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_prepared(path, expected_hash: str | None = None) -> PreparedData | None:
    """Load a cache; returns None when it is missing, stale or from another format version."""
    path = Path(path)
    if not path.exists():
        return None
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__meta__"]))
        if header.get("version") != CACHE_VERSION:
            return None
        if expected_hash is not None and header["config_hash"] != expected_hash:
            return None
        sets = {}
        for split_name in ("train", "val"):
            sets[split_name] = SegmentSet(
                *(z[f"{split_name}/{f}"] for f in ("X", "y", "window_labels", "pump", "position", "dates"))
            )
    return PreparedData(sets["train"], sets["val"], header["config_hash"], header["meta"])


def synth_spec_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
