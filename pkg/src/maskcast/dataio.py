"""Zonal load/weather ingestion, daily-peak feature panels and synthetic data.

Hourly input uses a canonical CSV layout (header required)::

    date,hour,zone,demand_mw,dry_bulb_f,dew_point_f

with ``date`` as ``YYYY-MM-DD`` and ``hour`` in 1..24 (hour-ending convention,
as in the ISO-NE zonal workbooks).  See the README for the column mapping from
the public zonal files.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

HOURLY_COLUMNS = ("date", "hour", "zone", "demand_mw", "dry_bulb_f", "dew_point_f")
DAILY_COLUMNS = ("date", "zone", "peak_demand_mw", "dry_bulb_f", "dew_point_f")
CATEGORICAL_NAMES = ("month", "day_of_month", "day_of_week")


# ---------------------------------------------------------------------------
# Hourly ingestion
# ---------------------------------------------------------------------------


def _parse_row(row: list[str], where: str) -> tuple:
    if len(row) != len(HOURLY_COLUMNS):
        raise DataError(f"{where}: expected {len(HOURLY_COLUMNS)} fields, got {len(row)}")
    date_s, hour_s, zone, demand_s, dry_s, dew_s = (c.strip() for c in row)
    try:
        date = dt.date.fromisoformat(date_s)
    except ValueError:
        raise DataError(f"{where}: bad date {date_s!r}") from None
    try:
        hour = int(hour_s)
    except ValueError:
        raise DataError(f"{where}: bad hour {hour_s!r}") from None
    if not 1 <= hour <= 24:
        raise DataError(f"{where}: hour {hour} outside 1..24")
    if not zone:
        raise DataError(f"{where}: empty zone")
    values = []
    for name, s in zip(HOURLY_COLUMNS[3:], (demand_s, dry_s, dew_s)):
        try:
            v = float(s)
        except ValueError:
            raise DataError(f"{where}: bad {name} {s!r}") from None
        if not math.isfinite(v):
            raise DataError(f"{where}: non-finite {name}")
        values.append(v)
    if values[0] < 0:
        raise DataError(f"{where}: negative demand {values[0]}")
    return (date, hour, zone, *values)


def ingest_hourly(files: Sequence[str | Path]) -> pd.DataFrame:
    """Read canonical hourly CSV files into one validated, time-sorted table.

    Exact duplicate rows are dropped; a repeated ``(date, hour, zone)`` key with
    different values raises :class:`DataError`.  Rows whose dew point exceeds
    the dry-bulb temperature by more than 5 F are kept but logged.
    """
    if not files:
        raise DataError("no input files given")
    rows = []
    for path in files:
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != HOURLY_COLUMNS:
                raise DataError(
                    f"{path}:1: header must be {','.join(HOURLY_COLUMNS)}, got {header}"
                )
            for row in reader:
                if not row:
                    continue
                rows.append(_parse_row(row, f"{path}:{reader.line_num}"))
    if not rows:
        raise DataError("input files contain no records")

    df = pd.DataFrame(rows, columns=list(HOURLY_COLUMNS))
    df["date"] = pd.to_datetime(df["date"])
    df = df.drop_duplicates()
    dup = df.duplicated(subset=["date", "hour", "zone"], keep=False)
    if dup.any():
        first = df[dup].iloc[0]
        raise DataError(
            f"conflicting duplicate records for zone {first['zone']} at "
            f"{first['date'].date()} hour {first['hour']} ({int(dup.sum())} rows involved)"
        )
    df = df.sort_values(["date", "hour", "zone"], kind="mergesort").reset_index(drop=True)

    bad_dew = df["dew_point_f"] > df["dry_bulb_f"] + 5
    if bad_dew.any():
        logger.warning("%d records have dew point > dry bulb + 5 F", int(bad_dew.sum()))
    for (zone, year), n in ingest_summary(df).items():
        logger.info("zone %s year %d: %d rows", zone, year, n)
    return df


def ingest_summary(hourly: pd.DataFrame) -> dict[tuple[str, int], int]:
    """Row counts keyed by ``(zone, year)``."""
    counts = hourly.groupby([hourly["zone"], hourly["date"].dt.year]).size()
    return {(str(z), int(y)): int(n) for (z, y), n in counts.items()}


# ---------------------------------------------------------------------------
# Daily feature panel
# ---------------------------------------------------------------------------


def _calendar(dates: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    idx = pd.DatetimeIndex(dates)
    return (
        idx.month.to_numpy(np.int64),
        idx.day.to_numpy(np.int64),
        idx.dayofweek.to_numpy(np.int64),
    )


@dataclass(frozen=True)
class FeatureTable:
    """Aligned daily panel of predictors and per-zone peak demand.

    ``dry_bulb``, ``dew_point`` and ``demand`` are ``(n_days, n_zones)`` arrays.
    Continuous predictors are laid out as all dry-bulb columns followed by all
    dew-point columns; the categorical block is (month, day of month, day of week).
    """

    dates: np.ndarray
    zones: tuple[str, ...]
    dry_bulb: np.ndarray
    dew_point: np.ndarray
    demand: np.ndarray
    meta: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        object.__setattr__(self, "dates", dates)
        n, z = len(dates), len(self.zones)
        for name in ("dry_bulb", "dew_point", "demand"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n, z):
                raise DataError(f"{name} has shape {arr.shape}, expected {(n, z)}")
            object.__setattr__(self, name, arr)
        if n > 1 and np.any(np.diff(dates).astype(np.int64) != 1):
            gaps = dates[1:][np.diff(dates).astype(np.int64) != 1]
            raise DataError(f"dates are not consecutive days; breaks before {gaps[:5]}")
        if not np.all(np.isfinite(self.demand)) or np.any(self.demand <= 0):
            raise DataError("demand values must be finite and positive")
        if not (np.all(np.isfinite(self.dry_bulb)) and np.all(np.isfinite(self.dew_point))):
            raise DataError("weather values must be finite")

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def n_zones(self) -> int:
        return len(self.zones)

    @property
    def x_cat(self) -> np.ndarray:
        """Integer calendar codes, shape ``(n_days, 3)``."""
        return np.stack(_calendar(self.dates), axis=1)

    @property
    def x_cont(self) -> np.ndarray:
        return np.concatenate([self.dry_bulb, self.dew_point], axis=1)

    @property
    def y(self) -> np.ndarray:
        return self.demand

    @property
    def predictor_channels(self) -> list[str]:
        return [f"dry_bulb:{z}" for z in self.zones] + [f"dew_point:{z}" for z in self.zones]

    @property
    def forecast_channels(self) -> list[str]:
        return [f"demand:{z}" for z in self.zones]

    @property
    def years(self) -> np.ndarray:
        return self.dates.astype("datetime64[Y]").astype(np.int64) + 1970

    def slice(self, start: int, stop: int) -> FeatureTable:
        return FeatureTable(
            self.dates[start:stop],
            self.zones,
            self.dry_bulb[start:stop],
            self.dew_point[start:stop],
            self.demand[start:stop],
            self.meta,
        )

    def index_of(self, date: str | np.datetime64 | dt.date) -> int:
        d = np.datetime64(date, "D")
        i = int(np.searchsorted(self.dates, d))
        if i >= len(self) or self.dates[i] != d:
            raise DataError(f"date {d} not in table ({self.dates[0]}..{self.dates[-1]})")
        return i

    def to_frame(self) -> pd.DataFrame:
        n, z = self.demand.shape
        return pd.DataFrame(
            {
                "date": np.repeat(self.dates, z).astype(str),
                "zone": np.tile(np.array(self.zones, dtype=object), n),
                "peak_demand_mw": self.demand.ravel(),
                "dry_bulb_f": self.dry_bulb.ravel(),
                "dew_point_f": self.dew_point.ravel(),
            }
        )

    def write_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> FeatureTable:
        missing = set(DAILY_COLUMNS) - set(df.columns)
        if missing:
            raise DataError(f"daily table lacks columns {sorted(missing)}")
        df = df.assign(date=pd.to_datetime(df["date"]), zone=df["zone"].astype(str))
        zones = tuple(sorted(df["zone"].unique()))
        wide = df.pivot(index="date", columns="zone")
        if wide.isna().any().any():
            raise DataError("daily table is missing (date, zone) entries")
        return cls(
            wide.index.to_numpy().astype("datetime64[D]"),
            zones,
            wide["dry_bulb_f"][list(zones)].to_numpy(),
            wide["dew_point_f"][list(zones)].to_numpy(),
            wide["peak_demand_mw"][list(zones)].to_numpy(),
        )

    @classmethod
    def read_csv(cls, path: str | Path) -> FeatureTable:
        return cls.from_frame(pd.read_csv(path, float_precision="round_trip"))


def downsample_daily_peak(hourly: pd.DataFrame) -> FeatureTable:
    """Reduce an hourly table to daily peaks per zone.

    Weather predictors are taken at the hour of peak demand; ties resolve to
    the earliest hour, so the result does not depend on input row order.
    """
    df = hourly.assign(day=pd.to_datetime(hourly["date"]).dt.normalize())
    df = df.sort_values(["zone", "day", "hour"], kind="mergesort").reset_index(drop=True)
    zones = tuple(sorted(df["zone"].astype(str).unique()))
    full = pd.date_range(df["day"].min(), df["day"].max(), freq="D")

    problems = []
    for zone in zones:
        have = pd.DatetimeIndex(df.loc[df["zone"] == zone, "day"].unique())
        gap = full.difference(have)
        if len(gap):
            listed = ", ".join(str(d.date()) for d in gap[:10])
            more = f" (+{len(gap) - 10} more)" if len(gap) > 10 else ""
            problems.append(f"zone {zone} missing {len(gap)} days: {listed}{more}")
    if problems:
        raise DataError("; ".join(problems))

    peak_rows = df.loc[df.groupby(["zone", "day"], sort=True)["demand_mw"].idxmax()]
    wide = peak_rows.pivot(index="day", columns="zone")
    cols = list(zones)
    return FeatureTable(
        wide.index.to_numpy().astype("datetime64[D]"),
        zones,
        wide["dry_bulb_f"][cols].to_numpy(),
        wide["dew_point_f"][cols].to_numpy(),
        wide["demand_mw"][cols].to_numpy(),
    )


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train: FeatureTable
    validation: FeatureTable
    test: FeatureTable


def split_dataset(
    table: FeatureTable,
    train_end_year: int | None = None,
    test_year: int | None = None,
    *,
    n_pretest_days: int | None = None,
    validation_fraction: float = 0.2,
) -> DatasetSplit:
    """Chronological train/validation/test split.

    Either give ``train_end_year`` and ``test_year`` (every day of the table
    must fall in one of the two ranges), or ``n_pretest_days`` to use the first
    that many days for training plus validation and the rest for testing.  The
    validation set is the final ``validation_fraction`` of the pre-test days.
    """
    n = len(table)
    if n_pretest_days is not None:
        if train_end_year is not None or test_year is not None:
            raise ConfigError("give either years or n_pretest_days, not both")
        if not 0 < n_pretest_days < n:
            raise DataError(f"n_pretest_days={n_pretest_days} must lie in 1..{n - 1}")
        n_pre = n_pretest_days
    else:
        if train_end_year is None or test_year is None:
            raise ConfigError("train_end_year and test_year are required")
        if train_end_year >= test_year:
            raise ConfigError("train_end_year must precede test_year")
        years = table.years
        is_test = years == test_year
        is_pre = years <= train_end_year
        if not is_test.any():
            raise DataError(f"test year {test_year} absent from table")
        if not is_pre.any():
            raise DataError(f"no days on or before {train_end_year} in table")
        if not np.all(is_test | is_pre):
            raise DataError(
                f"table has days outside <= {train_end_year} and {test_year}; slice it first"
            )
        n_pre = int(is_pre.sum())

    n_val = int(round(n_pre * validation_fraction))
    n_train = n_pre - n_val
    if n_train < 1 or n_val < 1:
        raise DataError(f"pre-test span of {n_pre} days too short to split")
    return DatasetSplit(
        table.slice(0, n_train), table.slice(n_train, n_pre), table.slice(n_pre, n)
    )


# ---------------------------------------------------------------------------
# Synthetic panels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings for a synthetic zonal demand panel.

    Demand follows ``y_t = w_f * g(x_t) + w_a * y_{t-1} + s_t + noise_scale * eps_t``
    per zone (see :func:`signal_map` and :func:`calendar_seasonality`), with the
    AR(1) weather anomalies controlled by ``weather_persistence``.
    """

    n_days: int = 3000
    n_zones: int = 2
    weather_persistence: float = 0.7
    future_signal_weight: float = 3.0
    autoregressive_weight: float = 0.5
    noise_scale: float = 1.0
    seed: int = 0
    start_date: str = "2011-01-01"
    base_level: float = 50.0

    def __post_init__(self):
        if self.n_days < 2 or self.n_zones < 1:
            raise ConfigError("n_days must be >= 2 and n_zones >= 1")
        if not 0 <= self.weather_persistence < 1:
            raise ConfigError("weather_persistence must lie in [0, 1)")
        if self.future_signal_weight < 0 or self.autoregressive_weight < 0:
            raise ConfigError("signal weights must be nonnegative")
        if self.autoregressive_weight >= 1:
            raise ConfigError("autoregressive_weight must be < 1 for a stationary panel")
        if not self.noise_scale > 0:
            raise ConfigError("noise_scale must be positive")
        if not self.base_level > 0:
            raise ConfigError("base_level must be positive")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SyntheticSpec:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


_BURN_IN = 200


def _day_of_year(dates: np.ndarray) -> np.ndarray:
    return pd.DatetimeIndex(dates).dayofyear.to_numpy(np.float64)


def zone_levels(n_zones: int, base_level: float) -> np.ndarray:
    return base_level * (1.0 + 0.25 * np.arange(n_zones))


def calendar_seasonality(dates: np.ndarray, n_zones: int, base_level: float) -> np.ndarray:
    """Deterministic calendar component ``s_t`` of the synthetic demand, ``(n, n_zones)``.

    A zone level ``L_z = base_level * (1 + 0.25 z)`` scaled by a month effect
    (twice-yearly cosine evaluated at the month, peaking in winter and summer)
    and a 6% weekend dip, so it is a function of the calendar codes alone.
    """
    idx = pd.DatetimeIndex(dates)
    month = idx.month.to_numpy(np.float64)
    weekend = (idx.dayofweek.to_numpy() >= 5).astype(np.float64)
    shape = 1.0 + 0.08 * np.cos(4 * np.pi * (month - 1.5) / 12) - 0.06 * weekend
    return shape[:, None] * zone_levels(n_zones, base_level)[None, :]


def signal_map(dry_bulb: np.ndarray, dew_point: np.ndarray) -> np.ndarray:
    """Weather-to-demand map ``g`` used by the generator (linear plus harmonic).

    With ``u = (dry_bulb - 55) / 15`` and ``v = (dew_point - 45) / 15``,
    ``g = 0.3 u + 0.2 v - cos(pi u / 2)``: demand rises in both hot and cold weather.
    """
    u = (dry_bulb - 55.0) / 15.0
    v = (dew_point - 45.0) / 15.0
    return 0.3 * u + 0.2 * v - np.cos(np.pi * u / 2.0)


def _ar1(rng: np.random.Generator, n: int, k: int, phi: float) -> np.ndarray:
    eps = rng.standard_normal((n, k))
    out = np.empty((n, k))
    out[0] = eps[0]
    scale = math.sqrt(1.0 - phi * phi)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + scale * eps[t]
    return out


def generate_synthetic(spec: SyntheticSpec) -> FeatureTable:
    """Generate a reproducible synthetic panel from ``spec``.

    The per-zone constant added to keep demand positive is stored in
    ``table.meta["offset"]`` (zero unless the raw series dips below 1 MW).
    """
    rng = np.random.default_rng(spec.seed)
    n_total = spec.n_days + _BURN_IN
    start = np.datetime64(spec.start_date, "D")
    all_dates = start + np.arange(-_BURN_IN, spec.n_days)
    z = spec.n_zones

    doy = _day_of_year(all_dates)
    climate = 55.0 - 20.0 * np.cos(2 * np.pi * (doy - 15) / 365.25)
    dry = climate[:, None] + 10.0 * _ar1(rng, n_total, z, spec.weather_persistence)
    dew = np.minimum(dry - 8.0 + 4.0 * _ar1(rng, n_total, z, spec.weather_persistence), dry)

    season = calendar_seasonality(all_dates, z, spec.base_level)
    drive = spec.future_signal_weight * signal_map(dry, dew) + season
    noise = spec.noise_scale * rng.standard_normal((n_total, z))
    a = spec.autoregressive_weight
    y = np.empty((n_total, z))
    prev = drive[0] / (1.0 - a)
    for t in range(n_total):
        prev = drive[t] + a * prev + noise[t]
        y[t] = prev

    sl = slice(_BURN_IN, None)
    y = y[sl]
    offset = np.maximum(0.0, 1.0 - y.min(axis=0))
    return FeatureTable(
        all_dates[sl],
        tuple(f"Z{i + 1}" for i in range(z)),
        dry[sl],
        dew[sl],
        y + offset,
        meta={"offset": offset, "spec": dataclasses.asdict(spec)},
    )


def synthetic_forecast_distribution(
    table: FeatureTable, spec: SyntheticSpec, origin: int, steps: int
) -> tuple[np.ndarray, np.ndarray]:
    """Exact Gaussian predictive law of a synthetic panel.

    Returns ``(mean, std)`` for days ``origin .. origin + steps - 1`` given the
    demand observed up to ``origin - 1`` and the weather on every forecast day.
    ``mean`` has shape ``(steps, n_zones)``, ``std`` shape ``(steps,)``.
    """
    if not 1 <= origin or origin + steps > len(table):
        raise DataError("origin/steps outside table")
    offset = np.asarray(table.meta.get("offset", np.zeros(table.n_zones)))
    a = spec.autoregressive_weight
    sl = slice(origin, origin + steps)
    season = calendar_seasonality(table.dates[sl], table.n_zones, spec.base_level)
    drive = spec.future_signal_weight * signal_map(table.dry_bulb[sl], table.dew_point[sl]) + season
    mean = np.empty((steps, table.n_zones))
    prev = table.demand[origin - 1] - offset
    for h in range(steps):
        prev = drive[h] + a * prev
        mean[h] = prev + offset
    var = spec.noise_scale**2 * np.cumsum(a ** (2 * np.arange(steps)))
    return mean, np.sqrt(var)


def synthetic_conditional_mean(table: FeatureTable, spec: SyntheticSpec) -> np.ndarray:
    """One-step conditional mean ``E[y_t | y_{t-1}, x_t]`` for days 1..n-1."""
    offset = np.asarray(table.meta.get("offset", np.zeros(table.n_zones)))
    season = calendar_seasonality(table.dates[1:], table.n_zones, spec.base_level)
    g = signal_map(table.dry_bulb[1:], table.dew_point[1:])
    prev = table.demand[:-1] - offset
    return spec.future_signal_weight * g + spec.autoregressive_weight * prev + season + offset


def concat_tables(tables: Iterable[FeatureTable]) -> FeatureTable:
    tables = list(tables)
    zones = tables[0].zones
    if any(t.zones != zones for t in tables):
        raise DataError("cannot concatenate tables with different zones")
    return FeatureTable(
        np.concatenate([t.dates for t in tables]),
        zones,
        np.concatenate([t.dry_bulb for t in tables]),
        np.concatenate([t.dew_point for t in tables]),
        np.concatenate([t.demand for t in tables]),
        tables[0].meta,
    )
