"""Sliding windows, normalisation and trailing-block masking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from .dataio import FeatureTable
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class WindowSpec:
    """Window geometry: ``history`` observed days followed by ``horizon`` forecast days."""

    history: int = 30
    horizon: int = 60
    stride: int = 1

    def __post_init__(self):
        if self.history < 1 or self.horizon < 1 or self.stride < 1:
            raise ConfigError(f"invalid window spec {self}")

    @property
    def length(self) -> int:
        return self.history + self.horizon


@dataclass(frozen=True)
class NormStats:
    """Per-channel training statistics (population std) for continuous channels."""

    channels: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    min: np.ndarray
    max: np.ndarray
    n_predictors: int

    def index(self, channel: str | int) -> int:
        if isinstance(channel, (int, np.integer)):
            if not 0 <= channel < len(self.channels):
                raise KeyError(f"channel index {channel} out of range")
            return int(channel)
        try:
            return self.channels.index(channel)
        except ValueError:
            raise KeyError(f"unknown channel {channel!r}") from None

    @property
    def predictor_slice(self) -> slice:
        return slice(0, self.n_predictors)

    @property
    def forecast_slice(self) -> slice:
        return slice(self.n_predictors, len(self.channels))

    def normalize(self, values, channels: slice | int | str) -> np.ndarray:
        sl = channels if isinstance(channels, slice) else self.index(channels)
        return (np.asarray(values, dtype=np.float64) - self.mean[sl]) / self.std[sl]

    def denormalize(self, values, channels: slice | int | str) -> np.ndarray:
        sl = channels if isinstance(channels, slice) else self.index(channels)
        return np.asarray(values, dtype=np.float64) * self.std[sl] + self.mean[sl]

    def normalized_range(self, channels: slice) -> tuple[np.ndarray, np.ndarray]:
        lo = (self.min[channels] - self.mean[channels]) / self.std[channels]
        hi = (self.max[channels] - self.mean[channels]) / self.std[channels]
        return lo, hi

    def to_dict(self) -> dict[str, Any]:
        return {
            "channels": list(self.channels),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "min": self.min.tolist(),
            "max": self.max.tolist(),
            "n_predictors": self.n_predictors,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> NormStats:
        return cls(
            tuple(d["channels"]),
            np.asarray(d["mean"], dtype=np.float64),
            np.asarray(d["std"], dtype=np.float64),
            np.asarray(d["min"], dtype=np.float64),
            np.asarray(d["max"], dtype=np.float64),
            int(d["n_predictors"]),
        )


def compute_norm_stats(train: FeatureTable) -> NormStats:
    if len(train) == 0:
        raise DataError("cannot compute statistics on an empty table")
    values = np.concatenate([train.x_cont, train.y], axis=1)
    channels = tuple(train.predictor_channels + train.forecast_channels)
    std = values.std(axis=0)
    constant = [c for c, s in zip(channels, std) if not s > 0]
    if constant:
        raise DataError(f"constant channels cannot be normalised: {constant}")
    return NormStats(
        channels, values.mean(axis=0), std, values.min(axis=0), values.max(axis=0),
        n_predictors=train.x_cont.shape[1],
    )


def denormalize(values, stats: NormStats, channel: str | int) -> np.ndarray:
    return stats.denormalize(values, channel)


@dataclass(frozen=True)
class Window:
    """One window; position ``history`` is the forecast origin."""

    cat: np.ndarray
    cont: np.ndarray
    y: np.ndarray
    origin_date: np.datetime64


@dataclass(frozen=True)
class WindowSet:
    """A stack of windows as arrays: ``cat (N, L, 3)``, ``cont (N, L, P)``, ``y (N, L, M)``."""

    spec: WindowSpec
    cat: np.ndarray
    cont: np.ndarray
    y: np.ndarray
    origin_dates: np.ndarray

    def __len__(self) -> int:
        return len(self.cat)

    def __getitem__(self, i: int) -> Window:
        return Window(self.cat[i], self.cont[i], self.y[i], self.origin_dates[i])

    def __iter__(self) -> Iterator[Window]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> WindowSet:
        return WindowSet(self.spec, self.cat[idx], self.cont[idx], self.y[idx], self.origin_dates[idx])


def normalize_table(table: FeatureTable, stats: NormStats) -> tuple[np.ndarray, np.ndarray]:
    """Z-scored continuous predictors and forecast variables of a table."""
    if table.predictor_channels + table.forecast_channels != list(stats.channels):
        raise DataError("table channels do not match the normalisation statistics")
    return (
        stats.normalize(table.x_cont, stats.predictor_slice),
        stats.normalize(table.y, stats.forecast_slice),
    )


def window_count(n_days: int, spec: WindowSpec) -> int:
    if n_days < spec.length:
        return 0
    return (n_days - spec.length) // spec.stride + 1


def make_windows(table: FeatureTable, spec: WindowSpec, stats: NormStats) -> WindowSet:
    n = len(table)
    if n < spec.length:
        raise DataError(f"table has {n} days; windows need at least {spec.length}")
    cont, y = normalize_table(table, stats)
    starts = np.arange(window_count(n, spec)) * spec.stride
    idx = starts[:, None] + np.arange(spec.length)[None, :]
    return WindowSet(
        spec,
        table.x_cat[idx],
        cont[idx],
        y[idx],
        table.dates[starts + spec.history],
    )


def sample_mask_length(rng: np.random.Generator, horizon: int) -> int:
    """Mask length drawn uniformly from ``1..horizon``."""
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    return int(rng.integers(1, horizon + 1))


@dataclass(frozen=True)
class MaskedBatch:
    """Windows whose last ``mask_length`` forecast steps carry random fill."""

    windows: WindowSet
    mask_length: int
    mask: np.ndarray
    fill_values: np.ndarray
    y: np.ndarray

    @property
    def cat(self) -> np.ndarray:
        return self.windows.cat

    @property
    def cont(self) -> np.ndarray:
        return self.windows.cont

    @property
    def target(self) -> np.ndarray:
        return self.windows.y


def apply_mask(
    windows: WindowSet, mask_length: int, rng: np.random.Generator, stats: NormStats
) -> MaskedBatch:
    """Replace the trailing ``mask_length`` forecast steps with uniform random fill.

    Fill values are drawn independently per position from the training range
    ``[min, max]`` of each forecast channel, in normalised units.
    """
    L = windows.spec.length
    if not 1 <= mask_length <= windows.spec.horizon:
        raise ConfigError(f"mask length {mask_length} outside 1..{windows.spec.horizon}")
    lo, hi = stats.normalized_range(stats.forecast_slice)
    fill = rng.uniform(lo, hi, size=(len(windows), mask_length, len(lo)))
    y = windows.y.copy()
    y[:, L - mask_length :, :] = fill
    mask = np.zeros(L, dtype=bool)
    mask[L - mask_length :] = True
    return MaskedBatch(windows, mask_length, mask, fill, y)


def fill_like(
    rng: np.random.Generator, stats: NormStats, shape: Sequence[int]
) -> np.ndarray:
    """Uniform in-range fill of shape ``(..., n_forecast_channels)``."""
    lo, hi = stats.normalized_range(stats.forecast_slice)
    return rng.uniform(lo, hi, size=(*shape, len(lo)))
