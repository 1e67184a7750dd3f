import calendar

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import hourly_frame, write_hourly_csv
from maskcast.dataio import (
    FeatureTable,
    SyntheticSpec,
    calendar_seasonality,
    downsample_daily_peak,
    generate_synthetic,
    ingest_hourly,
    ingest_summary,
    split_dataset,
    synthetic_conditional_mean,
)
from maskcast.errors import ConfigError, DataError


def test_ingest_one_zone_day(tmp_path):
    df = hourly_frame(["2021-01-01"], ["CT"])
    out = ingest_hourly([write_hourly_csv(tmp_path / "a.csv", df)])
    assert len(out) == 24
    assert ingest_summary(out) == {("CT", 2021): 24}


def test_ingest_rejects_hour_25(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("date,hour,zone,demand_mw,dry_bulb_f,dew_point_f\n2021-01-01,25,CT,10,30,20\n")
    with pytest.raises(DataError, match=r"bad.csv:2: hour 25"):
        ingest_hourly([p])


@pytest.mark.parametrize(
    "row, msg",
    [
        ("2021-13-01,1,CT,10,30,20", "bad date"),
        ("2021-01-01,1,CT,abc,30,20", "bad demand_mw"),
        ("2021-01-01,1,CT,-5,30,20", "negative demand"),
        ("2021-01-01,1,CT,10,30", "expected 6 fields"),
    ],
)
def test_ingest_malformed_rows(tmp_path, row, msg):
    p = tmp_path / "bad.csv"
    p.write_text("date,hour,zone,demand_mw,dry_bulb_f,dew_point_f\n" + row + "\n")
    with pytest.raises(DataError, match=msg):
        ingest_hourly([p])


def test_ingest_header_and_empty_input(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("a,b,c\n")
    with pytest.raises(DataError, match="header"):
        ingest_hourly([p])
    with pytest.raises(DataError):
        ingest_hourly([])


def test_ingest_duplicates(tmp_path):
    df = hourly_frame(["2021-01-01"], ["CT"])
    a = write_hourly_csv(tmp_path / "a.csv", df)
    b = write_hourly_csv(tmp_path / "b.csv", df.iloc[:3])
    assert len(ingest_hourly([a, b])) == 24
    conflict = df.iloc[:1].copy()
    conflict["demand_mw"] += 1
    c = write_hourly_csv(tmp_path / "c.csv", conflict)
    with pytest.raises(DataError, match="conflicting duplicate"):
        ingest_hourly([a, c])


def test_ingest_ten_years_hourly_count(tmp_path):
    dates = pd.date_range("2011-01-01", "2020-12-31", freq="D")
    df = hourly_frame(dates, ["CT"])
    out = ingest_hourly([write_hourly_csv(tmp_path / "ct.csv", df)])
    assert len(out) == 87_672
    assert sum(ingest_summary(out).values()) == 87_672


def test_daily_peak_simple():
    df = hourly_frame(["2021-01-01"], ["CT"]).iloc[:3].copy()
    df["demand_mw"] = [10.0, 15.0, 12.0]
    table = downsample_daily_peak(df)
    assert table.demand[0, 0] == 15.0
    assert table.dry_bulb[0, 0] == df["dry_bulb_f"].iloc[1]


def test_daily_peak_constant_day():
    df = hourly_frame(["2021-01-01"], ["CT"], demand=np.full(24, 42.0))
    table = downsample_daily_peak(df)
    assert table.demand[0, 0] == 42.0
    # ties resolve to the earliest hour
    assert table.dry_bulb[0, 0] == df.loc[df["hour"] == 1, "dry_bulb_f"].iloc[0]


def test_daily_peak_2011_2020_day_count():
    # calendar enumeration oracle
    expected = sum(366 if calendar.isleap(y) else 365 for y in range(2011, 2021))
    assert expected == 3653
    dates = pd.date_range("2011-01-01", "2020-12-31", freq="D")
    df = hourly_frame(dates, ["CT", "ME"])
    table = downsample_daily_peak(df)
    assert len(table) == expected
    feb29 = table.index_of("2012-02-29")
    assert table.x_cat[feb29].tolist() == [2, 29, 2]


def test_daily_peak_gap_listed():
    df = hourly_frame(["2021-01-01", "2021-01-02", "2021-01-03"], ["CT", "ME"])
    df = df[~((df["zone"] == "ME") & (df["date"] == "2021-01-02"))]
    with pytest.raises(DataError, match="zone ME missing 1 days: 2021-01-02"):
        downsample_daily_peak(df)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_daily_peak_brute_force_and_permutation(n_days, n_zones, seed):
    rng = np.random.default_rng(seed)
    dates = pd.date_range("2020-02-27", periods=n_days, freq="D")
    zones = [f"Z{i}" for i in range(n_zones)]
    # integer demands make ties likely
    df = hourly_frame(dates, zones, rng, demand=rng.integers(1, 6, n_days * 24 * n_zones).astype(float))
    table = downsample_daily_peak(df)
    shuffled = downsample_daily_peak(df.sample(frac=1.0, random_state=seed % 1000))
    assert np.array_equal(table.demand, shuffled.demand)
    assert np.array_equal(table.dry_bulb, shuffled.dry_bulb)
    assert np.array_equal(table.dew_point, shuffled.dew_point)
    for i, d in enumerate(dates):
        for j, z in enumerate(zones):
            day = df[(df["date"] == d) & (df["zone"] == z)]
            assert table.demand[i, j] == max(day["demand_mw"])


def test_feature_table_invariants():
    dates = np.array(["2021-01-01", "2021-01-03"], dtype="datetime64[D]")
    ones = np.ones((2, 1))
    with pytest.raises(DataError, match="consecutive"):
        FeatureTable(dates, ("A",), ones, ones, ones)
    with pytest.raises(DataError, match="positive"):
        FeatureTable(dates[:1], ("A",), ones[:1], ones[:1], np.zeros((1, 1)))


def test_feature_table_csv_round_trip(tmp_path, small_table):
    p = tmp_path / "daily.csv"
    small_table.write_csv(p)
    back = FeatureTable.read_csv(p)
    assert np.array_equal(back.dates, small_table.dates)
    assert np.array_equal(back.demand, small_table.demand)
    assert np.array_equal(back.dew_point, small_table.dew_point)
    assert back.zones == small_table.zones


def _years_table(first, last, zones=1):
    dates = np.arange(np.datetime64(f"{first}-01-01"), np.datetime64(f"{last + 1}-01-01"))
    ones = np.ones((len(dates), zones))
    return FeatureTable(dates, tuple(f"Z{i}" for i in range(zones)), ones, ones, ones)


def test_split_by_years():
    table = _years_table(2011, 2021)
    s = split_dataset(table, 2020, 2021)
    assert len(s.test) == 365
    assert len(s.train) + len(s.validation) == 3653
    assert len(s.validation) == round(0.2 * 3653)
    assert s.validation.dates[-1] < s.test.dates[0]
    assert s.train.dates[-1] < s.validation.dates[0]


def test_split_rejects_missing_ranges():
    with pytest.raises(DataError):
        split_dataset(_years_table(2021, 2021), 2020, 2021)
    with pytest.raises(DataError, match="absent"):
        split_dataset(_years_table(2011, 2020), 2020, 2021)


def test_split_toy_counts():
    table = _years_table(2021, 2021).slice(0, 100)
    s = split_dataset(table, n_pretest_days=80)
    assert (len(s.train), len(s.validation), len(s.test)) == (64, 16, 20)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 200), st.data())
def test_split_partitions(n, data):
    table = _years_table(2021, 2021).slice(0, n)
    k = data.draw(st.integers(2, n - 1))
    try:
        s = split_dataset(table, n_pretest_days=k)
    except DataError:
        return
    parts = [s.train.dates, s.validation.dates, s.test.dates]
    assert sum(map(len, parts)) == n
    assert np.array_equal(np.concatenate(parts), table.dates)


def test_synthetic_deterministic():
    spec = SyntheticSpec(n_days=300, n_zones=3, seed=11)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for name in ("demand", "dry_bulb", "dew_point"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert not np.array_equal(a.demand, generate_synthetic(SyntheticSpec(n_days=300, n_zones=3, seed=12)).demand)


def test_synthetic_degenerate_limit():
    spec = SyntheticSpec(n_days=400, n_zones=2, future_signal_weight=0.0, autoregressive_weight=0.0,
                         noise_scale=1e-12, seed=1)
    t = generate_synthetic(spec)
    np.testing.assert_allclose(t.demand, calendar_seasonality(t.dates, 2, spec.base_level), atol=1e-9)


def test_synthetic_residual_scale():
    spec = SyntheticSpec(n_days=10_000, n_zones=2, noise_scale=1.0, seed=5)
    t = generate_synthetic(spec)
    resid = t.demand[1:] - synthetic_conditional_mean(t, spec)
    assert abs(resid.std() - 1.0) < 0.05
    assert np.all(t.dew_point <= t.dry_bulb + 5)


def test_synthetic_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(weather_persistence=1.0)
    with pytest.raises(ConfigError):
        SyntheticSpec(future_signal_weight=-1)
    with pytest.raises(ConfigError, match="unknown"):
        SyntheticSpec.from_dict({"n_days": 10, "bogus": 1})
