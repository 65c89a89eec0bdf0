import io
import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pumpwatch.errors import (
    EmptyInput,
    EmptyTrades,
    MalformedRow,
    MissingColumn,
    NonMonotonicTimestamp,
    NonNumericCell,
    UnknownField,
    WindowTooLarge,
)
from pumpwatch.ingest import (
    COL,
    CSV_COLUMNS,
    ChunkSeries,
    TradeEvent,
    aggregate_chunks,
    count_inversions,
    load_feature_csv,
    parse_trades,
    pct_change,
    rolling_std,
    write_feature_csv,
)

HEADER = "timestamp_ms,price,quantity,side,is_rush_order\n"


def trade(ts, price=1.0, qty=1.0, side="buy", rush=False):
    return TradeEvent(ts, price, qty, side, rush)


def csv_of(rows):
    return HEADER + "".join(f"{t},{p},{q},{s},{r}\n" for t, p, q, s, r in rows)


def brute_inversions(v):
    return sum(1 for i in range(len(v)) for j in range(i + 1, len(v)) if v[i] > v[j])


def two_pass_std(v):
    n = len(v)
    mu = sum(v) / n
    return math.sqrt(sum((x - mu) ** 2 for x in v) / n)


# --- parse_trades ------------------------------------------------------------------

def test_empty_file_gives_empty_list():
    assert parse_trades(io.StringIO("")) == []
    assert parse_trades(b"", format="jsonl") == []
    with pytest.raises(EmptyInput):
        parse_trades(io.StringIO(""), allow_empty=False)


def test_single_row_round_trip():
    got = parse_trades(io.StringIO(csv_of([(1000, 2.5, 3.0, "S", 1)])))
    assert got == [TradeEvent(1000, 2.5, 3.0, "sell", True)]


def test_jsonl_matches_csv():
    rows = [(0, 1.0, 2.0, "B", 0), (5, 1.5, 1.0, "S", 1)]
    lines = "\n".join(json.dumps(dict(zip(("timestamp_ms", "price", "quantity", "side", "is_rush_order"), r))) for r in rows)
    assert parse_trades(io.StringIO(lines), format="jsonl") == parse_trades(io.StringIO(csv_of(rows)))


def test_unknown_field_is_rejected():
    with pytest.raises(UnknownField):
        parse_trades(io.StringIO(HEADER.strip() + ",venue\n1,1,1,B,0,x\n"))
    with pytest.raises(UnknownField):
        parse_trades(io.StringIO('{"timestamp_ms":1,"price":1,"quantity":1,"side":"B","is_rush_order":0,"x":1}'), format="jsonl")


def test_missing_column():
    with pytest.raises(MissingColumn) as info:
        parse_trades(io.StringIO("timestamp_ms,price,quantity,side\n1,1,1,B\n"))
    assert "is_rush_order" in str(info.value)


@pytest.mark.parametrize("bad,line", [
    ("1,1,1,X,0", 3),      # side
    ("1,-1,1,B,0", 3),     # price
    ("1,1,1,B,2", 3),      # flag
    ("x,1,1,B,0", 3),      # timestamp
    ("1,1,1,B", 3),        # field count
])
def test_malformed_row_reports_line(bad, line):
    with pytest.raises(MalformedRow) as info:
        parse_trades(io.StringIO(HEADER + "0,1,1,B,0\n" + bad + "\n"))
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_shuffled_timestamps_sorted_with_inversion_count():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        stamps = rng.integers(0, 50, size=int(rng.integers(2, 101))).tolist()
        rows = [(t, 1.0 + i, 1.0, "B", 0) for i, t in enumerate(stamps)]
        expected = brute_inversions(stamps)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            got = parse_trades(io.StringIO(csv_of(rows)))
        ts = [e.timestamp for e in got]
        assert ts == sorted(stamps)
        # stable: equal stamps keep input order, visible through the price tiebreak
        for a, b in zip(got, got[1:]):
            if a.timestamp == b.timestamp:
                assert a.price < b.price
        warns = [w.message for w in caught if isinstance(w.message, NonMonotonicTimestamp)]
        if expected:
            assert len(warns) == 1 and warns[0].inversions == expected
        else:
            assert not warns


@given(st.lists(st.integers(-5, 5), max_size=60))
def test_count_inversions_matches_brute_force(v):
    assert count_inversions(v) == brute_inversions(v)


# --- aggregation -----------------------------------------------------------------

def brute_bucket(stamps, chunk_size):
    t0 = stamps[0]
    buckets = {}
    for t in stamps:
        k = 0
        while not (t0 + k * chunk_size * 1000 <= t < t0 + (k + 1) * chunk_size * 1000):
            k += 1
        buckets[k] = buckets.get(k, 0) + 1
    return max(buckets) + 1, buckets


def test_two_trades_six_seconds_apart():
    s = aggregate_chunks([trade(0), trade(6000)], 5, window=2)
    assert len(s) == 2
    assert s.dates[0] == 0.0 and s.dates[1] == 5.0


def test_constant_price_has_zero_price_features():
    trades = [trade(k * 5000 + 100, price=3.0) for k in range(30)]
    s = aggregate_chunks(trades, 5)
    assert np.all(s.data[1:, COL["StdPrice"]] == 0)
    assert np.all(s.data[1:, COL["AvgPrice"]] == 0)


def test_std_volume_matches_two_pass_oracle():
    rng = np.random.default_rng(3)
    volumes = rng.uniform(0.5, 50.0, size=20)
    trades = [trade(k * 15000, qty=float(v)) for k, v in enumerate(volumes)]
    got = aggregate_chunks(trades, 15, window=10).data[:, COL["StdVolume"]]
    for k in range(20):
        want = two_pass_std(volumes[max(0, k - 9) : k + 1].tolist())
        assert abs(got[k] - want) <= 1e-12 * want  # k=0: both exactly 0


@pytest.mark.filterwarnings("ignore::pumpwatch.errors.WindowTooLarge")
@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 400_000), min_size=1, max_size=1000), st.sampled_from([5, 15, 25]))
def test_chunk_count_matches_brute_bucketer(stamps, chunk_size):
    stamps = sorted(stamps)
    s = aggregate_chunks([trade(t) for t in stamps], chunk_size, window=2)
    n_brute, buckets = brute_bucket(stamps, chunk_size)
    assert len(s) == n_brute == math.ceil((stamps[-1] - stamps[0] + 1) / (chunk_size * 1000))
    # per-chunk counts are only visible through StdTrades, so compare that
    counts = np.zeros(n_brute)
    for k, c in buckets.items():
        counts[k] = c
    for k in range(1, n_brute):
        if counts[k] == 0:
            counts[k] = counts[k - 1]
    np.testing.assert_allclose(s.data[:, COL["StdTrades"]], rolling_std(counts, 2), rtol=1e-12, atol=0)


def test_empty_chunk_carries_forward():
    # chunk 1 has no trades
    trades = [trade(0, price=2.0, qty=4.0), trade(10_000, price=3.0, qty=1.0)]
    s = aggregate_chunks(trades, 5, window=2)
    assert len(s) == 3
    # chunk 1 copies chunk 0 (zero change), so volume std over chunks 0..1 is 0
    assert s.data[1, COL["StdVolume"]] == 0.0
    assert s.data[1, COL["AvgVolume"]] == 0.0
    # chunk 2 changes relative to the carried values
    assert s.data[2, COL["AvgPrice"]] == pytest.approx((0.0 + 0.5) / 2)


def test_rolling_std_nonnegative_and_oracle():
    for seed in range(10):
        v = np.random.default_rng(seed).normal(5, 3, size=50)
        got = rolling_std(v, 7)
        assert np.all(got >= 0)
        for k in range(50):
            want = two_pass_std(v[max(0, k - 6) : k + 1].tolist())
            assert abs(got[k] - want) <= 1e-12 * max(want, 1e-12)


def test_pct_change_zero_denominator():
    out = pct_change(np.array([0.0, 2.0, 2.0]))
    assert out[0] == 0 and np.isfinite(out[1]) and out[1] == pytest.approx(2.0 / 1e-9)
    assert out[2] == 0


def test_time_encodings_on_unit_circle():
    trades = [trade(t) for t in range(0, 3_600_000 * 5, 250_000)]
    d = aggregate_chunks(trades, 25).data
    for a, b in (("HourSin", "HourCos"), ("MinuteSin", "MinuteCos")):
        np.testing.assert_allclose(d[:, COL[a]] ** 2 + d[:, COL[b]] ** 2, 1.0, atol=1e-9)


def test_aggregate_is_deterministic():
    rng = np.random.default_rng(0)
    stamps = np.sort(rng.integers(0, 600_000, size=300))
    trades = [trade(int(t), price=float(rng.uniform(1, 2)), qty=float(rng.uniform(0.1, 3)), rush=bool(rng.integers(2))) for t in stamps]
    a, b = aggregate_chunks(trades, 5), aggregate_chunks(list(trades), 5)
    assert a.data.tobytes() == b.data.tobytes()


def test_aggregate_errors():
    with pytest.raises(EmptyTrades):
        aggregate_chunks([], 5)
    with pytest.warns(WindowTooLarge):
        aggregate_chunks([trade(0), trade(5000)], 5, window=10)


def test_label_spans_mark_overlapping_chunks():
    trades = [trade(k * 5000) for k in range(6)]
    s = aggregate_chunks(trades, 5, label_spans=[(7000, 12000)], window=2)
    assert s.labels.tolist() == [0, 1, 1, 0, 0, 0]


# --- feature CSV ------------------------------------------------------------------

def small_series():
    rng = np.random.default_rng(5)
    data = rng.normal(size=(3, 15))
    data[:, COL["PumpIndex"]] = [0, 0, 1]
    data[:, COL["Symbol"]] = [0, 0, 1]
    data[:, COL["Date"]] = [100.0, 115.0, 130.0]
    return ChunkSeries(15, data, [0, 1, 0], ["AAA", "BBB"])


def test_header_only_file(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text(",".join(CSV_COLUMNS) + "\n")
    s = load_feature_csv(p)
    assert len(s) == 0 and s.data.shape == (0, 15)


def test_feature_csv_round_trip(tmp_path):
    s = small_series()
    back = load_feature_csv(write_feature_csv(s, tmp_path / "f_15s.csv"))
    assert back.equals(s)
    assert back.chunk_size == 15


def test_positive_count_matches_line_count(tmp_path):
    p = write_feature_csv(small_series(), tmp_path / "f.csv")
    grep = sum(1 for line in p.read_text().splitlines()[1:] if line.endswith(",1"))
    assert int(load_feature_csv(p).labels.sum()) == grep == 1


def test_header_aliases(tmp_path):
    p = write_feature_csv(small_series(), tmp_path / "f.csv")
    text = p.read_text().splitlines()
    text[0] = text[0].replace("StdRushOrder", "std_rush_order").replace("Label", "gt")
    q = tmp_path / "g.csv"
    q.write_text("\n".join(text) + "\n")
    assert load_feature_csv(q, chunk_size=15).equals(load_feature_csv(p, chunk_size=15))


def test_iso_dates_are_accepted(tmp_path):
    p = write_feature_csv(small_series(), tmp_path / "f.csv")
    lines = p.read_text().splitlines()
    first = lines[1].split(",")
    first[0] = "1970-01-01 00:01:40"
    lines[1] = ",".join(first)
    p.write_text("\n".join(lines) + "\n")
    assert load_feature_csv(p).dates[0] == 100.0


def test_missing_column_named(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text(",".join(c for c in CSV_COLUMNS if c != "StdPrice") + "\n")
    with pytest.raises(MissingColumn) as info:
        load_feature_csv(p)
    assert "StdPrice" in str(info.value)


def test_non_numeric_cell_reports_position(tmp_path):
    p = write_feature_csv(small_series(), tmp_path / "f.csv")
    lines = p.read_text().splitlines()
    cells = lines[2].split(",")
    cells[CSV_COLUMNS.index("AvgVolume")] = "oops"
    lines[2] = ",".join(cells)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(NonNumericCell) as info:
        load_feature_csv(p)
    assert (info.value.row, info.value.column) == (2, "AvgVolume")
