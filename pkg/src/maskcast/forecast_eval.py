"""Inference for the four formulations, forecast metrics and report files."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
import torch

from .dataio import FeatureTable
from .errors import ConfigError, DataError
from .models import LinearRegressor
from .training import backend_note, pinball_loss
from .windowing import NormStats, WindowSpec, fill_like, normalize_table

logger = logging.getLogger(__name__)

METHOD_ORDER = ("mmmpf", "rsf", "dmf", "sbf")


def qcol(tau: float) -> str:
    """Column name for a quantile level: 0.05 -> ``q05``, 0.5 -> ``q50``."""
    pct = tau * 100
    return f"q{int(round(pct)):02d}" if abs(pct - round(pct)) < 1e-9 else f"q{pct:g}"


def _median_index(taus: Sequence[float]) -> int:
    return int(np.argmin(np.abs(np.asarray(taus) - 0.5)))


# ---------------------------------------------------------------------------
# Requests and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForecastRequest:
    """History up to the day before ``origin`` plus predictors for ``length`` forecast days."""

    origin: np.datetime64
    length: int
    history: FeatureTable
    future_cat: np.ndarray
    future_cont: np.ndarray

    def __post_init__(self):
        if self.length < 1:
            raise ConfigError("forecast length must be >= 1")
        if self.future_cat.shape[0] != self.length or self.future_cont.shape[0] != self.length:
            raise DataError(f"future predictors must cover {self.length} days")
        if len(self.history) and self.history.dates[-1] != self.origin - np.timedelta64(1, "D"):
            raise DataError("history must end the day before the origin")

    @property
    def dates(self) -> np.ndarray:
        return self.origin + np.arange(self.length)

    @classmethod
    def from_table(cls, table: FeatureTable, origin, length: int) -> ForecastRequest:
        """Build a request from a table holding both history and the future predictors.

        Demand recorded on or after ``origin`` is never passed to a forecaster.
        """
        if length < 1:
            raise ConfigError("forecast length must be >= 1")
        t = table.index_of(origin)
        if t == 0:
            raise DataError(f"no history before {origin}")
        if t + length > len(table):
            missing = table.dates[-1] + np.arange(1, t + length - len(table) + 1)
            raise DataError(f"future predictors missing for {[str(d) for d in missing[:10]]}")
        return cls(
            np.datetime64(origin, "D"),
            length,
            table.slice(0, t),
            table.x_cat[t : t + length],
            table.x_cont[t : t + length],
        )


@dataclass(frozen=True)
class ForecastResult:
    """Quantile forecasts in MW, ``values[h, zone, q]`` (sorted along ``q``, clamped at 0)."""

    origin: np.datetime64
    dates: np.ndarray
    zones: tuple[str, ...]
    quantile_levels: tuple[float, ...]
    values: np.ndarray
    raw: np.ndarray
    method: str
    model: str

    @property
    def length(self) -> int:
        return len(self.dates)

    def quantile(self, tau: float) -> np.ndarray:
        try:
            return self.values[..., self.quantile_levels.index(tau)]
        except ValueError:
            raise KeyError(f"quantile level {tau} not in {self.quantile_levels}") from None

    def to_frame(self, actuals: np.ndarray | None = None) -> pd.DataFrame:
        """Fan-chart layout: one row per (zone, date) with the quantile tracks."""
        rows = []
        for z, zone in enumerate(self.zones):
            d = {"zone": zone, "date": self.dates.astype(str), "horizon": np.arange(1, self.length + 1)}
            if actuals is not None:
                d["actual"] = actuals[:, z]
            for q, tau in enumerate(self.quantile_levels):
                d[qcol(tau)] = self.values[:, z, q]
            rows.append(pd.DataFrame(d))
        return pd.concat(rows, ignore_index=True)


def finalize_quantiles(pred_norm: np.ndarray, stats: NormStats) -> tuple[np.ndarray, np.ndarray]:
    """Denormalise ``(..., M, Q)`` predictions; return (sorted and clamped, raw)."""
    fs = stats.forecast_slice
    raw = pred_norm * stats.std[fs][:, None] + stats.mean[fs][:, None]
    values = np.sort(raw, axis=-1)
    neg = values < 0
    if neg.any():
        logger.warning("clamped %d negative demand forecasts to 0 MW", int(neg.sum()))
        values = np.where(neg, 0.0, values)
    return values, raw


# ---------------------------------------------------------------------------
# Batched forecasters on normalised arrays
# ---------------------------------------------------------------------------


def _t(a, dtype=torch.float32):
    return torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)


def _predict_mmmpf(model, spec: WindowSpec, stats, hist, fut, rng) -> np.ndarray:
    hcat, hcont, hy = hist
    fcat, fcont = fut
    B, l = fcat.shape[:2]
    if not 1 <= l <= spec.horizon:
        raise ConfigError(f"forecast length {l} outside 1..{spec.horizon}")
    need = spec.length - l
    if hcat.shape[1] < need:
        raise DataError(f"MMMPF forecast of {l} steps needs {need} history days, got {hcat.shape[1]}")
    cat = np.concatenate([hcat[:, hcat.shape[1] - need :], fcat], axis=1)
    cont = np.concatenate([hcont[:, hcont.shape[1] - need :], fcont], axis=1)
    y = np.concatenate([hy[:, hy.shape[1] - need :], fill_like(rng, stats, (B, l))], axis=1)
    ind = None
    if model.config.mask_indicator:
        ind = torch.zeros(B, spec.length)
        ind[:, need:] = 1.0
    with torch.no_grad():
        out = model(_t(cat, torch.long), _t(cont), _t(y), ind)
    return out[:, need:].double().numpy()


def _predict_rsf(model, spec: WindowSpec, hist, fut) -> np.ndarray:
    hcat, hcont, hy = hist
    fcat, fcont = fut
    T = spec.history
    if hcat.shape[1] < T:
        raise DataError(f"RSF forecast needs {T} history days, got {hcat.shape[1]}")
    cat = _t(hcat[:, -T:], torch.long)
    cont = _t(hcont[:, -T:])
    y = _t(hy[:, -T:])
    med = _median_index(model.quantile_levels)
    outs = []
    with torch.no_grad():
        for h in range(fcat.shape[1]):
            pred = model(cat, cont, y)[:, -1]
            outs.append(pred)
            cat = torch.cat([cat[:, 1:], _t(fcat[:, h : h + 1], torch.long)], dim=1)
            cont = torch.cat([cont[:, 1:], _t(fcont[:, h : h + 1])], dim=1)
            y = torch.cat([y[:, 1:], pred[:, None, :, med]], dim=1)
    return torch.stack(outs, dim=1).double().numpy()


def _predict_dmf(model, spec: WindowSpec, hist, length: int) -> np.ndarray:
    hcat, hcont, hy = hist
    T = spec.history
    if hcat.shape[1] < T:
        raise DataError(f"DMF forecast needs {T} history days, got {hcat.shape[1]}")
    if length > model.direct_horizon:
        raise ConfigError(f"forecast length {length} exceeds direct horizon {model.direct_horizon}")
    with torch.no_grad():
        out = model.forward_direct(_t(hcat[:, -T:], torch.long), _t(hcont[:, -T:]), _t(hy[:, -T:]))
    return out[:, :length].double().numpy()


def _predict_sbf(model, fut) -> np.ndarray:
    fcat, fcont = fut
    if isinstance(model, LinearRegressor):
        return model.predict(fcat, fcont)
    with torch.no_grad():
        return model(_t(fcat, torch.long), _t(fcont)).double().numpy()


def predict_normalized(method: str, model, spec: WindowSpec, stats: NormStats, hist, fut,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Normalised ``(B, l, M, Q)`` forecasts from batched normalised inputs."""
    if method == "mmmpf":
        return _predict_mmmpf(model, spec, stats, hist, fut, rng or np.random.default_rng(0))
    if method == "rsf":
        return _predict_rsf(model, spec, hist, fut)
    if method == "dmf":
        return _predict_dmf(model, spec, hist, fut[0].shape[1])
    if method == "sbf":
        return _predict_sbf(model, fut)
    raise ConfigError(f"unknown method {method!r}; choose from {list(METHOD_ORDER)}")


def _request_arrays(request: ForecastRequest, stats: NormStats):
    h = request.history
    if len(h):
        hcont, hy = normalize_table(h, stats)
        hist = (h.x_cat[None], hcont[None], hy[None])
    else:
        P, M = stats.n_predictors, len(stats.channels) - stats.n_predictors
        hist = (np.zeros((1, 0, 3), np.int64), np.zeros((1, 0, P)), np.zeros((1, 0, M)))
    fut = (request.future_cat[None], stats.normalize(request.future_cont, stats.predictor_slice)[None])
    return hist, fut


def forecast(method: str, model, request: ForecastRequest, stats: NormStats, spec: WindowSpec,
             *, seed: int = 0) -> ForecastResult:
    if method in ("mmmpf", "dmf") and request.length > spec.horizon:
        raise ConfigError(f"forecast length {request.length} exceeds trained horizon {spec.horizon}")
    hist, fut = _request_arrays(request, stats)
    pred = predict_normalized(method, model, spec, stats, hist, fut, np.random.default_rng(seed))[0]
    values, raw = finalize_quantiles(pred, stats)
    zones = tuple(c.split(":", 1)[1] for c in stats.channels[stats.forecast_slice])
    return ForecastResult(request.origin, request.dates, zones, tuple(model.quantile_levels),
                          values, raw, method, model.architecture)


def forecast_mmmpf(model, request, stats, spec, *, seed: int = 0) -> ForecastResult:
    """Mask the last ``request.length`` demand steps of a full-length window and read them back.

    The window ends on the last forecast day, so shorter requests draw on a
    longer stretch of observed history, exactly as during masked training.
    """
    return forecast("mmmpf", model, request, stats, spec, seed=seed)


def forecast_rsf(model, request, stats, spec) -> ForecastResult:
    """Recursive rollout; each step's median is fed back as the next step's demand input."""
    return forecast("rsf", model, request, stats, spec)


def forecast_dmf(model, request, stats, spec) -> ForecastResult:
    """One pass over the history; the request's future predictors are never read."""
    return forecast("dmf", model, request, stats, spec)


def forecast_sbf(model, request, stats, spec) -> ForecastResult:
    """Independent per-day regression on each future day's predictors; history unused."""
    return forecast("sbf", model, request, stats, spec)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def mape(pred, actual) -> float:
    """Mean absolute percentage error, in percent."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {actual.shape}")
    if np.any(actual == 0):
        raise ValueError("MAPE undefined for zero actual values")
    return float(100.0 * np.mean(np.abs(pred - actual) / np.abs(actual)))


def coverage(results, actuals=None, lo_tau: float = 0.05, hi_tau: float = 0.95) -> float:
    """Fraction of cells whose actual lies inside ``[q(lo_tau), q(hi_tau)]``.

    ``results`` is either a backtest records frame (with an ``actual`` column)
    or a sequence of :class:`ForecastResult` paired with ``actuals`` arrays.
    """
    if isinstance(results, pd.DataFrame):
        for tau in (lo_tau, hi_tau):
            if qcol(tau) not in results:
                raise KeyError(f"quantile level {tau} missing from results")
        lo, hi, act = results[qcol(lo_tau)].to_numpy(), results[qcol(hi_tau)].to_numpy(), results["actual"].to_numpy()
    else:
        if actuals is None:
            raise ValueError("actuals are required with ForecastResult inputs")
        lo = np.concatenate([r.quantile(lo_tau).ravel() for r in results])
        hi = np.concatenate([r.quantile(hi_tau).ravel() for r in results])
        act = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in actuals])
    if len(act) == 0:
        raise ValueError("no cells to score")
    return float(np.mean((lo <= act) & (act <= hi)))


# ---------------------------------------------------------------------------
# Backtesting
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    method: str
    model: str
    quantile_levels: tuple[float, ...]
    records: pd.DataFrame
    cells: pd.DataFrame = field(init=False)
    aggregate_mape: float = field(init=False)
    pinball: dict[float, float] = field(init=False)
    coverage: float | None = field(init=False)

    def __post_init__(self):
        med = qcol(self.quantile_levels[_median_index(self.quantile_levels)])
        rec = self.records
        cells = []
        for (zone, h), g in rec.groupby(["zone", "horizon"], sort=True):
            cells.append({"zone": zone, "horizon": int(h), "mape": mape(g[med], g["actual"]), "n": len(g)})
        self.cells = pd.DataFrame(cells, columns=["zone", "horizon", "mape", "n"])
        self.aggregate_mape = float(self.cells["mape"].mean())
        self.pinball = {
            tau: pinball_loss(rec["actual"].to_numpy(), rec[qcol(tau)].to_numpy(), tau)
            for tau in self.quantile_levels
        }
        if 0.05 in self.quantile_levels and 0.95 in self.quantile_levels:
            self.coverage = coverage(rec)
        else:
            self.coverage = None

    @property
    def tag(self) -> str:
        return f"{self.model}-{self.method}"

    def mape_by_horizon(self) -> pd.Series:
        return self.cells.groupby("horizon")["mape"].mean()

    def restrict(self, max_horizon: int) -> EvalReport:
        return EvalReport(self.method, self.model, self.quantile_levels,
                          self.records[self.records["horizon"] <= max_horizon].reset_index(drop=True))

    @classmethod
    def from_records_csv(cls, path: str | Path) -> EvalReport:
        rec = pd.read_csv(path, float_precision="round_trip")
        method, model = rec["method"].iloc[0], rec["model"].iloc[0]
        taus = tuple(float(c) for c in json.loads(rec["quantile_levels"].iloc[0]))
        cols = ["origin", "horizon", "date", "zone", "actual", *map(qcol, taus)]
        return cls(method, model, taus, rec[cols])


def backtest(
    method: str,
    model,
    table: FeatureTable,
    stats: NormStats,
    spec: WindowSpec,
    *,
    eval_start: int | str | np.datetime64 | None = None,
    max_horizon: int | None = None,
    seed: int = 0,
    batch_size: int = 512,
) -> EvalReport:
    """Rolling-origin evaluation at stride 1.

    Every day from ``eval_start`` (default: the first day with ``spec.history``
    days of history in ``table``) serves as an origin with one forecast of
    ``min(horizon, days left)`` steps, so late origins only contribute the
    horizons that fall inside the table.
    """
    n = len(table)
    T = spec.history
    if n < T + 1:
        raise DataError(f"test table has {n} days; backtesting needs at least {T + 1}")
    H = spec.horizon if max_horizon is None else min(spec.horizon, max_horizon)
    if eval_start is None:
        first = T
    elif isinstance(eval_start, (int, np.integer)):
        first = int(eval_start)
    else:
        first = table.index_of(eval_start)
    first = max(first, T)
    if method == "mmmpf" and n < spec.length:
        raise DataError(f"MMMPF backtest needs at least {spec.length} days in the table, got {n}")

    cont_n, y_n = normalize_table(table, stats)
    cat = table.x_cat
    rng = np.random.default_rng(seed)
    taus = tuple(model.quantile_levels)
    zones = table.zones
    origins = np.arange(first, n)
    lengths = np.minimum(H, n - origins)
    frames = []
    for l in np.unique(lengths)[::-1]:
        group = origins[lengths == l]
        need = spec.length - l if method == "mmmpf" else T
        for s in range(0, len(group), batch_size):
            chunk = group[s : s + batch_size]
            hidx = chunk[:, None] + np.arange(-need, 0)[None, :]
            fidx = chunk[:, None] + np.arange(l)[None, :]
            hist = (cat[hidx], cont_n[hidx], y_n[hidx])
            fut = (cat[fidx], cont_n[fidx])
            pred = predict_normalized(method, model, spec, stats, hist, fut, rng)
            values, _ = finalize_quantiles(pred, stats)
            actual = table.demand[fidx]
            B = len(chunk)
            d = {
                "origin": np.repeat(table.dates[chunk], l * len(zones)).astype(str),
                "horizon": np.tile(np.repeat(np.arange(1, l + 1), len(zones)), B),
                "date": table.dates[fidx].repeat(len(zones), axis=1).ravel().astype(str),
                "zone": np.tile(np.array(zones, dtype=object), B * l),
                "actual": actual.ravel(),
            }
            for q, tau in enumerate(taus):
                d[qcol(tau)] = values[..., q].ravel()
            frames.append(pd.DataFrame(d))
    records = (
        pd.concat(frames, ignore_index=True)
        .sort_values(["origin", "horizon", "zone"], kind="mergesort")
        .reset_index(drop=True)
    )
    return EvalReport(method, model.architecture, taus, records)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

_FLOAT = "%.10g"


def _method_rank(m: str) -> int:
    return METHOD_ORDER.index(m) if m in METHOD_ORDER else len(METHOD_ORDER)


def emit_report(
    reports: EvalReport | Iterable[EvalReport],
    out_dir: str | Path,
    *,
    fan_origin: str | None = None,
    plot: bool = False,
) -> list[Path]:
    """Write report files for one or more backtests and return their paths.

    * ``table1.csv``: aggregate MAPE per (model, method)
    * ``mape_cells.csv``: MAPE per (method, model, zone, horizon)
    * ``mape_by_horizon.csv``: zone-averaged MAPE curve per (method, model)
    * ``summary.json``: aggregates, pinball loss per level, interval coverage
    * ``records_<model>-<method>.csv``: every (origin, horizon, zone) forecast with its actual
    * ``fan_<model>-<method>.csv``: quantile tracks from one origin (the first
      full-horizon origin unless ``fan_origin`` is given)
    """
    reports = [reports] if isinstance(reports, EvalReport) else list(reports)
    reports.sort(key=lambda r: (r.model, _method_rank(r.method)))
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written: list[Path] = []

    def write_csv(df: pd.DataFrame, name: str, float_format: str = _FLOAT):
        path = out / name
        try:
            df.to_csv(path, index=False, float_format=float_format, lineterminator="\n")
        except OSError as exc:
            raise OSError(f"failed to write {path}: {exc}") from exc
        written.append(path)

    write_csv(
        pd.DataFrame([{"model": r.model, "method": r.method, "mape": r.aggregate_mape} for r in reports]),
        "table1.csv",
    )
    write_csv(
        pd.concat([r.cells.assign(method=r.method, model=r.model) for r in reports], ignore_index=True)[
            ["method", "model", "zone", "horizon", "mape", "n"]
        ],
        "mape_cells.csv",
    )
    write_csv(
        pd.concat(
            [r.mape_by_horizon().reset_index().assign(method=r.method, model=r.model) for r in reports],
            ignore_index=True,
        )[["method", "model", "horizon", "mape"]],
        "mape_by_horizon.csv",
    )
    summary = {
        "backend": backend_note(),
        "results": [
            {
                "model": r.model,
                "method": r.method,
                "aggregate_mape": round(r.aggregate_mape, 10),
                "pinball": {qcol(t): round(v, 10) for t, v in r.pinball.items()},
                "coverage_05_95": None if r.coverage is None else round(r.coverage, 10),
                "n_records": len(r.records),
            }
            for r in reports
        ],
    }
    path = out / "summary.json"
    path.write_text(json.dumps(summary, indent=2) + "\n")
    written.append(path)

    for r in reports:
        rec = r.records.assign(method=r.method, model=r.model, quantile_levels=json.dumps(list(r.quantile_levels)))
        # full precision so `report` can rebuild the aggregates exactly
        write_csv(rec, f"records_{r.tag}.csv", "%.17g")
        write_csv(fan_chart(r, fan_origin), f"fan_{r.tag}.csv")

    if plot:
        written += _plot(reports, out, fan_origin)
    return written


def fan_chart(report: EvalReport, origin: str | None = None) -> pd.DataFrame:
    rec = report.records
    if origin is None:
        full = rec.groupby("origin")["horizon"].max()
        origin = full.index[full == full.max()][0]
    sel = rec[rec["origin"] == str(origin)]
    if sel.empty:
        raise DataError(f"origin {origin} not in backtest records")
    cols = ["zone", "date", "actual", *map(qcol, report.quantile_levels)]
    return sel.sort_values(["zone", "horizon"], kind="mergesort")[cols].reset_index(drop=True)


def _plot(reports: Sequence[EvalReport], out: Path, fan_origin) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    fig, ax = plt.subplots(figsize=(7, 4))
    for r in reports:
        curve = r.mape_by_horizon()
        ax.plot(curve.index, curve.values, label=f"{r.method.upper()} ({r.model})")
    ax.set_xlabel("horizon (days)")
    ax.set_ylabel("MAPE (%)")
    ax.legend()
    fig.tight_layout()
    p = out / "mape_by_horizon.png"
    fig.savefig(p, metadata={"Software": None})
    plt.close(fig)
    paths.append(p)

    for r in reports:
        fan = fan_chart(r, fan_origin)
        taus = r.quantile_levels
        zones = fan["zone"].unique()
        fig, axes = plt.subplots(len(zones), 1, figsize=(7, 2.5 * len(zones)), squeeze=False)
        for ax, zone in zip(axes[:, 0], zones):
            z = fan[fan["zone"] == zone]
            x = pd.to_datetime(z["date"])
            ax.plot(x, z["actual"], color="k", lw=1, label="actual")
            if len(taus) >= 2:
                ax.fill_between(x, z[qcol(taus[0])], z[qcol(taus[-1])], alpha=0.3, label="interval")
            ax.plot(x, z[qcol(taus[_median_index(taus)])], label="median")
            ax.set_title(str(zone))
        axes[0, 0].legend()
        fig.tight_layout()
        p = out / f"fan_{r.tag}.png"
        fig.savefig(p, metadata={"Software": None})
        plt.close(fig)
        paths.append(p)
    return paths
