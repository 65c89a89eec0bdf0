"""Raw trade parsing, chunk aggregation and feature-CSV I/O."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    EmptyInput,
    EmptyTrades,
    MalformedRow,
    MissingColumn,
    NonMonotonicTimestamp,
    NonNumericCell,
    UnknownField,
    ValidationError,
    WindowTooLarge,
)

TRADE_FIELDS = ("timestamp_ms", "price", "quantity", "side", "is_rush_order")

FEATURE_COLUMNS = (
    "Date",
    "HourSin",
    "HourCos",
    "MinuteSin",
    "MinuteCos",
    "PumpIndex",
    "Symbol",
    "StdRushOrder",
    "AvgRushOrder",
    "StdTrades",
    "StdVolume",
    "AvgVolume",
    "StdPrice",
    "AvgPrice",
    "AvgPriceMax",
)
LABEL_COLUMN = "Label"
CSV_COLUMNS = FEATURE_COLUMNS + (LABEL_COLUMN,)
COL = {name: i for i, name in enumerate(FEATURE_COLUMNS)}

CHUNK_SIZES = (5, 15, 25)
DEFAULT_WINDOW = 10
PCT_EPS = 1e-9


@dataclass(frozen=True)
class TradeEvent:
    timestamp: int  # ms since epoch
    price: float
    quantity: float
    side: str  # "buy" | "sell"
    is_rush_order: bool

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")
        if not self.price > 0:
            raise ValueError("price must be > 0")
        if not self.quantity > 0:
            raise ValueError("quantity must be > 0")
        if self.side not in ("buy", "sell"):
            raise ValueError(f"side must be buy or sell, got {self.side!r}")


@dataclass(frozen=True)
class ChunkFeatures:
    date: float
    hour_sin: float
    hour_cos: float
    minute_sin: float
    minute_cos: float
    pump_index: int
    symbol_id: int
    std_rush_order: float
    avg_rush_order: float
    std_trades: float
    std_volume: float
    avg_volume: float
    std_price: float
    avg_price: float
    avg_price_max: float
    label: int

    def vector(self) -> np.ndarray:
        return np.array(
            [
                self.date, self.hour_sin, self.hour_cos, self.minute_sin, self.minute_cos,
                self.pump_index, self.symbol_id, self.std_rush_order, self.avg_rush_order,
                self.std_trades, self.std_volume, self.avg_volume, self.std_price,
                self.avg_price, self.avg_price_max,
            ],
            dtype=np.float64,
        )


@dataclass
class ChunkSeries:
    """Chunk rows stored column-wise: ``data`` is (N, 15) in FEATURE_COLUMNS order."""

    chunk_size: int
    data: np.ndarray
    labels: np.ndarray
    symbols: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).reshape(-1, len(FEATURE_COLUMNS))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.data) != len(self.labels):
            raise ValueError("data and labels differ in length")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def pump_index(self) -> np.ndarray:
        return self.data[:, COL["PumpIndex"]].astype(np.int64)

    @property
    def dates(self) -> np.ndarray:
        return self.data[:, COL["Date"]]

    @property
    def rows(self) -> list[ChunkFeatures]:
        out = []
        for vec, label in zip(self.data, self.labels):
            vals = vec.tolist()
            vals[COL["PumpIndex"]] = int(vals[COL["PumpIndex"]])
            vals[COL["Symbol"]] = int(vals[COL["Symbol"]])
            out.append(ChunkFeatures(*vals, label=int(label)))
        return out

    @classmethod
    def from_rows(cls, chunk_size: int, rows: Sequence[ChunkFeatures], symbols=None) -> "ChunkSeries":
        data = np.array([r.vector() for r in rows]).reshape(-1, len(FEATURE_COLUMNS))
        labels = np.array([r.label for r in rows], dtype=np.int64)
        return cls(chunk_size, data, labels, list(symbols or []))

    def take(self, index) -> "ChunkSeries":
        return ChunkSeries(self.chunk_size, self.data[index], self.labels[index], list(self.symbols))

    def equals(self, other: "ChunkSeries") -> bool:
        return (
            self.chunk_size == other.chunk_size
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.labels, other.labels)
            and self.symbols == other.symbols
        )


# --- raw trades ---------------------------------------------------------------

def _read_text(source) -> str:
    if isinstance(source, bytes):
        return source.decode("utf-8")
    if isinstance(source, (str, os.PathLike)):
        return Path(source).read_text(encoding="utf-8")
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def _bool01(value, line: int) -> bool:
    if isinstance(value, bool):
        return value
    s = str(value).strip()
    if s in ("0", "1"):
        return s == "1"
    raise MalformedRow(line, f"is_rush_order must be 0 or 1, got {value!r}")


def _side(value, line: int) -> str:
    s = str(value).strip()
    if s == "B":
        return "buy"
    if s == "S":
        return "sell"
    raise MalformedRow(line, f"side must be B or S, got {value!r}")


def _make_event(rec: dict, line: int) -> TradeEvent:
    try:
        ts = int(str(rec["timestamp_ms"]).strip())
        price = float(rec["price"])
        qty = float(rec["quantity"])
    except (TypeError, ValueError) as exc:
        raise MalformedRow(line, str(exc)) from None
    try:
        return TradeEvent(ts, price, qty, _side(rec["side"], line), _bool01(rec["is_rush_order"], line))
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise MalformedRow(line, str(exc)) from None


def count_inversions(values: Sequence[int]) -> int:
    """Pairs i < j with values[i] > values[j], by merge sort."""

    def sort(a):
        if len(a) <= 1:
            return a, 0
        mid = len(a) // 2
        left, x = sort(a[:mid])
        right, y = sort(a[mid:])
        merged, inv, i, j = [], x + y, 0, 0
        while i < len(left) and j < len(right):
            if right[j] < left[i]:
                merged.append(right[j])
                inv += len(left) - i
                j += 1
            else:
                merged.append(left[i])
                i += 1
        merged.extend(left[i:])
        merged.extend(right[j:])
        return merged, inv

    return sort(list(values))[1]


def parse_trades(source, format: str = "csv", allow_empty: bool = True) -> list[TradeEvent]:
    """Parse raw trades from CSV or JSON-lines.

    Out-of-order timestamps are stable-sorted and reported through a single
    ``NonMonotonicTimestamp`` warning whose ``inversions`` attribute counts the
    out-of-order pairs.
    """
    text = _read_text(source)
    events: list[TradeEvent] = []
    if format == "csv":
        lines = text.splitlines()
        if not any(ln.strip() for ln in lines):
            if not allow_empty:
                raise EmptyInput("no trades in input")
            return []
        reader = csv.reader(lines)
        header = [h.strip() for h in next(reader)]
        unknown = [h for h in header if h not in TRADE_FIELDS]
        if unknown:
            raise UnknownField(f"unknown column(s): {', '.join(unknown)}")
        missing = [f for f in TRADE_FIELDS if f not in header]
        if missing:
            raise MissingColumn(missing[0])
        for lineno, row in enumerate(reader, start=2):
            if not row or not any(c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise MalformedRow(lineno, f"expected {len(header)} fields, got {len(row)}")
            events.append(_make_event(dict(zip(header, row)), lineno))
    elif format == "jsonl":
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRow(lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise MalformedRow(lineno, "expected a JSON object")
            unknown = [k for k in rec if k not in TRADE_FIELDS]
            if unknown:
                raise UnknownField(f"line {lineno}: unknown field(s): {', '.join(unknown)}")
            missing = [f for f in TRADE_FIELDS if f not in rec]
            if missing:
                raise MalformedRow(lineno, f"missing field {missing[0]}")
            events.append(_make_event(rec, lineno))
    else:
        raise ValueError(f"unsupported format {format!r}")

    if not events and not allow_empty:
        raise EmptyInput("no trades in input")
    stamps = [e.timestamp for e in events]
    if any(b < a for a, b in zip(stamps, stamps[1:])):
        warnings.warn(NonMonotonicTimestamp(count_inversions(stamps)), stacklevel=2)
        events = sorted(events, key=lambda e: e.timestamp)  # sorted() is stable
    return events


# --- aggregation -------------------------------------------------------------

def rolling_std(values: np.ndarray, window: int) -> np.ndarray:
    """Population std over the trailing ``window`` entries (shorter prefix at the start)."""
    values = np.asarray(values, dtype=np.float64)
    out = np.empty(len(values))
    head = min(window - 1, len(values))
    for k in range(head):
        out[k] = values[: k + 1].std()
    if len(values) >= window:
        out[window - 1 :] = sliding_window_view(values, window).std(axis=1)
    return out


def rolling_mean(values: np.ndarray, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    out = np.empty(len(values))
    head = min(window - 1, len(values))
    for k in range(head):
        out[k] = values[: k + 1].mean()
    if len(values) >= window:
        out[window - 1 :] = sliding_window_view(values, window).mean(axis=1)
    return out


def pct_change(values: np.ndarray) -> np.ndarray:
    """Change relative to the previous entry; first entry 0, denominator floored at 1e-9."""
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros(len(values))
    if len(values) > 1:
        prev = values[:-1]
        out[1:] = (values[1:] - prev) / np.maximum(prev, PCT_EPS)
    return out


def time_encodings(seconds: np.ndarray) -> np.ndarray:
    """(N, 4) hour sin/cos and minute sin/cos of UTC times."""
    enc = np.empty((len(seconds), 4))
    for i, s in enumerate(seconds):
        t = datetime.fromtimestamp(float(s), tz=timezone.utc)
        h = 2 * math.pi * t.hour / 24
        m = 2 * math.pi * t.minute / 60
        enc[i] = (math.sin(h), math.cos(h), math.sin(m), math.cos(m))
    return enc


def aggregate_chunks(
    trades: Sequence[TradeEvent],
    chunk_size: int,
    window: int = DEFAULT_WINDOW,
    pump_index: int = 0,
    symbol_id: int = 0,
    label_spans: Iterable[tuple[int, int]] = (),
    symbols: Sequence[str] | None = None,
) -> ChunkSeries:
    """Bucket trades into ``chunk_size``-second chunks anchored at the first trade.

    Per chunk we take the trade count, base volume, rush-order count, last
    price and max price. A chunk with no trades carries those values forward
    from the previous chunk and has a percent change of 0. Rolling features
    use the trailing ``window`` chunks. Chunks overlapping any
    ``label_spans`` interval (ms, half-open) are labelled 1.
    """
    if not trades:
        raise EmptyTrades("aggregate_chunks needs at least one trade")
    if chunk_size not in CHUNK_SIZES:
        raise ValidationError(f"chunk_size must be one of {CHUNK_SIZES}, got {chunk_size}")
    if window < 2:
        raise ValidationError("window must be >= 2")
    ts = np.array([t.timestamp for t in trades], dtype=np.int64)
    if np.any(np.diff(ts) < 0):
        raise ValidationError("trades must be sorted by timestamp")
    price = np.array([t.price for t in trades])
    qty = np.array([t.quantity for t in trades])
    rush = np.array([t.is_rush_order for t in trades], dtype=np.float64)

    width_ms = chunk_size * 1000
    t0 = int(ts[0])
    idx = (ts - t0) // width_ms
    n = int(idx[-1]) + 1
    if n < window:
        warnings.warn(WindowTooLarge(f"{n} chunks < window {window}; leading chunks use the available prefix"), stacklevel=2)

    count = np.bincount(idx, minlength=n).astype(np.float64)
    volume = np.bincount(idx, weights=qty, minlength=n)
    rush_n = np.bincount(idx, weights=rush, minlength=n)
    last_price = np.full(n, np.nan)
    last_price[idx] = price  # later trades overwrite earlier ones within a chunk
    max_price = np.full(n, -np.inf)
    np.maximum.at(max_price, idx, price)

    empty = count == 0
    for k in np.flatnonzero(empty):  # chunk 0 always holds the first trade
        count[k], volume[k], rush_n[k] = count[k - 1], volume[k - 1], rush_n[k - 1]
        last_price[k], max_price[k] = last_price[k - 1], max_price[k - 1]

    def pct(v):
        p = pct_change(v)
        p[empty] = 0.0
        return p

    starts_ms = t0 + np.arange(n, dtype=np.int64) * width_ms
    dates = starts_ms / 1000.0
    data = np.empty((n, len(FEATURE_COLUMNS)))
    data[:, COL["Date"]] = dates
    data[:, COL["HourSin"] : COL["MinuteCos"] + 1] = time_encodings(dates)
    data[:, COL["PumpIndex"]] = pump_index
    data[:, COL["Symbol"]] = symbol_id
    data[:, COL["StdRushOrder"]] = rolling_std(rush_n, window)
    data[:, COL["AvgRushOrder"]] = rolling_mean(pct(rush_n), window)
    data[:, COL["StdTrades"]] = rolling_std(count, window)
    data[:, COL["StdVolume"]] = rolling_std(volume, window)
    data[:, COL["AvgVolume"]] = rolling_mean(pct(volume), window)
    data[:, COL["StdPrice"]] = rolling_std(last_price, window)
    data[:, COL["AvgPrice"]] = rolling_mean(pct(last_price), window)
    data[:, COL["AvgPriceMax"]] = rolling_mean(pct(max_price), window)

    labels = np.zeros(n, dtype=np.int64)
    ends_ms = starts_ms + width_ms
    for lo, hi in label_spans:
        labels[(starts_ms < hi) & (ends_ms > lo)] = 1
    return ChunkSeries(chunk_size, data, labels, list(symbols or []))


# --- feature CSV ---------------------------------------------------------------

def _norm(name: str) -> str:
    return name.replace("_", "").replace(" ", "").lower()


_ALIASES = {_norm(c): c for c in CSV_COLUMNS}
_ALIASES["gt"] = LABEL_COLUMN


def _parse_date(cell: str) -> float:
    try:
        return float(cell)
    except ValueError:
        pass
    t = datetime.fromisoformat(cell.strip())
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t.timestamp()


def load_feature_csv(path, chunk_size: int | None = None) -> ChunkSeries:
    """Read a pre-aggregated feature file.

    Header matching ignores case and underscores (``std_rush_order`` ==
    ``StdRushOrder``) and accepts ``gt`` for the label column. Symbol strings
    become dense integer ids in order of first appearance; rows keep file order.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingColumn(CSV_COLUMNS[0]) from None
        where = {}
        for i, h in enumerate(header):
            canon = _ALIASES.get(_norm(h))
            if canon is not None and canon not in where:
                where[canon] = i
        for col in CSV_COLUMNS:
            if col not in where:
                raise MissingColumn(col)
        symbols: dict[str, int] = {}
        data, labels = [], []
        for rowno, row in enumerate(reader, start=1):
            if not row:
                continue
            vec = np.empty(len(FEATURE_COLUMNS))
            for j, col in enumerate(FEATURE_COLUMNS):
                cell = row[where[col]]
                if col == "Symbol":
                    vec[j] = symbols.setdefault(cell, len(symbols))
                    continue
                try:
                    vec[j] = _parse_date(cell) if col == "Date" else float(cell)
                except ValueError:
                    raise NonNumericCell(rowno, col, cell) from None
            cell = row[where[LABEL_COLUMN]]
            try:
                lab = float(cell)
            except ValueError:
                raise NonNumericCell(rowno, LABEL_COLUMN, cell) from None
            if lab not in (0.0, 1.0):
                raise NonNumericCell(rowno, LABEL_COLUMN, cell)
            data.append(vec)
            labels.append(int(lab))
    if chunk_size is None:
        chunk_size = _infer_chunk_size(path)
    return ChunkSeries(chunk_size, np.array(data).reshape(-1, len(FEATURE_COLUMNS)), labels, list(symbols))


def _infer_chunk_size(path: Path) -> int:
    import re

    m = re.search(r"(\d+)\s*s", path.stem.lower())
    if m and int(m.group(1)) in CHUNK_SIZES:
        return int(m.group(1))
    return 15


def _fmt(v: float) -> str:
    return repr(float(v))


def write_feature_csv(series: ChunkSeries, path) -> Path:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for vec, label in zip(series.data, series.labels):
        row = []
        for j, col in enumerate(FEATURE_COLUMNS):
            if col == "PumpIndex":
                row.append(str(int(vec[j])))
            elif col == "Symbol":
                sid = int(vec[j])
                row.append(series.symbols[sid] if sid < len(series.symbols) else str(sid))
            else:
                row.append(_fmt(vec[j]))
        row.append(str(int(label)))
        w.writerow(row)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path
