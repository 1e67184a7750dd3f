import dataclasses
import logging
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest
import torch

from maskcast.dataio import FeatureTable, SyntheticSpec, generate_synthetic
from maskcast.errors import ConfigError, DataError
from maskcast.forecast_eval import (
    EvalReport,
    ForecastRequest,
    backtest,
    coverage,
    emit_report,
    fan_chart,
    finalize_quantiles,
    forecast_dmf,
    forecast_mmmpf,
    forecast_rsf,
    forecast_sbf,
    mape,
)
from maskcast.models import InputLayout, ModelConfig, build_model, build_regressor, one_hot_design
from maskcast.windowing import NormStats, WindowSpec, compute_norm_stats, normalize_table

TAUS = (0.05, 0.5, 0.95)


class Stub:
    """Sequence-model stand-in: ``fn(cat, cont, y) -> (B, L, M)`` broadcast to every quantile."""

    architecture = "stub"
    quantile_levels = TAUS
    uses_history = True
    config = SimpleNamespace(mask_indicator=False)

    def __init__(self, fn, spread=0.0):
        self.fn = fn
        self.spread = spread
        self.calls = 0

    def __call__(self, cat, cont, y=None, indicator=None):
        self.calls += 1
        base = self.fn(cat, cont, y)
        offs = torch.tensor([-self.spread, 0.0, self.spread], dtype=base.dtype)
        return base[..., None] + offs


def identity_stats(zones=("A",)):
    chans = tuple(f"dry_bulb:{z}" for z in zones) + tuple(f"dew_point:{z}" for z in zones) + tuple(
        f"demand:{z}" for z in zones)
    k = len(chans)
    return NormStats(chans, np.zeros(k), np.ones(k), np.full(k, -10.0), np.full(k, 10.0), 2 * len(zones))


def table(demand, start="2020-01-01", seed=0):
    demand = np.asarray(demand, float)
    demand = demand[:, None] if demand.ndim == 1 else demand
    n, z = demand.shape
    rng = np.random.default_rng(seed)
    dates = np.datetime64(start) + np.arange(n)
    dry = rng.normal(50, 10, (n, z))
    return FeatureTable(dates, tuple("ABCDEFGH"[:z]), dry, dry - 5, demand)


persistence = Stub(lambda cat, cont, y: y)


# --- metrics --------------------------------------------------------------


def test_mape_examples():
    assert mape([110, 90], [100, 100]) == 10.0
    assert mape([5.0, 7.0], [5.0, 7.0]) == 0.0
    with pytest.raises(ValueError, match="zero actual"):
        mape([1.0], [0.0])


def test_mape_random_recomputation():
    rng = np.random.default_rng(0)
    p, a = rng.uniform(1, 100, 500), rng.uniform(1, 100, 500)
    expected = 100 * sum(abs(x - y) / abs(y) for x, y in zip(p, a)) / 500
    assert mape(p, a) == pytest.approx(expected, rel=1e-12)


def test_coverage_counting():
    actual = np.arange(10.0)
    df = pd.DataFrame({"actual": actual, "q05": actual - 1, "q95": actual + 1})
    df.loc[3, "q05"] = 3.5
    assert coverage(df) == 0.9
    assert coverage(pd.DataFrame({"actual": actual, "q05": actual, "q95": actual})) == 1.0
    with pytest.raises(KeyError, match="0.95"):
        coverage(df.drop(columns="q95"))


def test_finalize_sorts_and_clamps(caplog):
    stats = identity_stats()
    pred = np.array([[[3.0, 1.0, 2.0]], [[-1.0, 0.5, 0.2]]])
    with caplog.at_level(logging.WARNING):
        values, raw = finalize_quantiles(pred, stats)
    assert values.tolist() == [[[1.0, 2.0, 3.0]], [[0.0, 0.2, 0.5]]]
    assert np.array_equal(raw, pred)
    assert "clamped 1 negative" in caplog.text


# --- formulations ---------------------------------------------------------


def test_rsf_stub_rollout_counts_up():
    t = table(np.r_[np.full(9, 3.0), 5.0, np.full(10, 1.0)])
    req = ForecastRequest.from_table(t, "2020-01-11", 6)
    stub = Stub(lambda cat, cont, y: y + 1)
    res = forecast_rsf(stub, req, identity_stats(), WindowSpec(10, 1))
    assert res.quantile(0.5)[:, 0].tolist() == [6.0, 7.0, 8.0, 9.0, 10.0, 11.0]
    assert stub.calls == 6


def test_rsf_single_step_equals_plain_prediction():
    t = generate_synthetic(SyntheticSpec(n_days=80, n_zones=2, seed=1))
    stats = compute_norm_stats(t)
    model = build_model(ModelConfig("lstm", seed=1), InputLayout.for_zones(2)).eval()
    req = ForecastRequest.from_table(t, t.dates[40], 1)
    res = forecast_rsf(model, req, stats, WindowSpec(30, 1))
    cont, y = normalize_table(t, stats)
    with torch.no_grad():
        out = model(torch.as_tensor(t.x_cat[None, 10:40]), torch.as_tensor(cont[None, 10:40], dtype=torch.float32),
                    torch.as_tensor(y[None, 10:40], dtype=torch.float32))[0, -1].double().numpy()
    expected, _ = finalize_quantiles(out, stats)
    np.testing.assert_allclose(res.values[0], expected, rtol=1e-12)


def test_rsf_first_step_perturbation_propagates():
    t = table(np.full(20, 4.0))
    req = ForecastRequest.from_table(t, "2020-01-11", 5)
    base = forecast_rsf(Stub(lambda c, x, y: 0.8 * y + 1), req, identity_stats(), WindowSpec(10, 1))

    bumped = Stub(lambda c, x, y: 0.8 * y + 1)
    inner = bumped.fn
    bumped.fn = lambda c, x, y: inner(c, x, y) + (0.5 if bumped.calls == 1 else 0.0)
    moved = forecast_rsf(bumped, req, identity_stats(), WindowSpec(10, 1))
    delta = moved.quantile(0.5)[:, 0] - base.quantile(0.5)[:, 0]
    # the stub runs in float32
    np.testing.assert_allclose(delta, 0.5 * 0.8 ** np.arange(5), rtol=1e-5)


@pytest.fixture(scope="module")
def weather_pair():
    """Same history, different weather from the origin onwards."""
    t = generate_synthetic(SyntheticSpec(n_days=200, n_zones=2, seed=4))
    o = 150
    dry = t.dry_bulb.copy()
    dry[o:] += 12.0
    u = dataclasses.replace(t, dry_bulb=dry, dew_point=np.minimum(t.dew_point, dry))
    return t, u, t.dates[o]


def test_dmf_ignores_future_weather(weather_pair):
    t, u, origin = weather_pair
    stats = compute_norm_stats(t)
    model = build_model(ModelConfig("lstm", seed=2), InputLayout.for_zones(2), direct_horizon=30).eval()
    spec = WindowSpec(30, 30)
    a = forecast_dmf(model, ForecastRequest.from_table(t, origin, 30), stats, spec)
    b = forecast_dmf(model, ForecastRequest.from_table(u, origin, 30), stats, spec)
    assert np.array_equal(a.values, b.values)
    assert a.length == 30
    short = forecast_dmf(model, ForecastRequest.from_table(t, origin, 7), stats, spec)
    np.testing.assert_array_equal(short.values, a.values[:7])


def test_mmmpf_and_sbf_use_future_weather(weather_pair):
    t, u, origin = weather_pair
    stats = compute_norm_stats(t)
    spec = WindowSpec(30, 30)
    lstm = build_model(ModelConfig("lstm", seed=2), InputLayout.for_zones(2)).eval()
    a = forecast_mmmpf(lstm, ForecastRequest.from_table(t, origin, 30), stats, spec, seed=0)
    b = forecast_mmmpf(lstm, ForecastRequest.from_table(u, origin, 30), stats, spec, seed=0)
    assert not np.allclose(a.values, b.values)
    fc = build_model(ModelConfig("fcnn", seed=2), InputLayout.for_zones(2)).eval()
    a = forecast_sbf(fc, ForecastRequest.from_table(t, origin, 30), stats, spec)
    b = forecast_sbf(fc, ForecastRequest.from_table(u, origin, 30), stats, spec)
    assert not np.allclose(a.values, b.values)


def test_mmmpf_flexible_lengths_and_seeded_fill():
    t = generate_synthetic(SyntheticSpec(n_days=200, n_zones=2, seed=5))
    stats = compute_norm_stats(t)
    spec = WindowSpec(30, 60)
    model = build_model(ModelConfig("lstm", seed=0), InputLayout.for_zones(2)).eval()
    origin = t.dates[130]
    for l_f in (1, 7, 30, 60):
        res = forecast_mmmpf(model, ForecastRequest.from_table(t, origin, l_f), stats, spec, seed=3)
        assert res.values.shape == (l_f, 2, 3)
        assert np.isfinite(res.values).all() and np.all(np.diff(res.values, axis=-1) >= 0)
    req = ForecastRequest.from_table(t, origin, 60)
    a = forecast_mmmpf(model, req, stats, spec, seed=3)
    b = forecast_mmmpf(model, req, stats, spec, seed=3)
    assert np.array_equal(a.values, b.values)
    with pytest.raises(ConfigError, match="exceeds trained horizon"):
        forecast_mmmpf(model, ForecastRequest.from_table(t, origin, 61), stats, spec)


def test_request_errors():
    t = table(np.full(40, 2.0))
    with pytest.raises(DataError, match="2020-02-10"):
        ForecastRequest.from_table(t, "2020-02-05", 6)
    with pytest.raises(ConfigError):
        ForecastRequest.from_table(t, "2020-01-20", 0)
    with pytest.raises(DataError, match="no history"):
        ForecastRequest.from_table(t, "2020-01-01", 2)
    req = ForecastRequest.from_table(t, "2020-01-05", 3)
    with pytest.raises(DataError, match="needs 10 history days"):
        forecast_rsf(persistence, req, identity_stats(), WindowSpec(10, 1))


def test_sbf_linear_is_design_product():
    t = generate_synthetic(SyntheticSpec(n_days=800, n_zones=2, seed=6))
    stats = compute_norm_stats(t)
    reg = build_regressor(ModelConfig("linear-ridge"), InputLayout.for_zones(2))
    cont, y = normalize_table(t, stats)
    reg.fit(t.x_cat[:700], cont[:700], y[:700])
    req = ForecastRequest.from_table(t, t.dates[720], 30)
    res = forecast_sbf(reg, req, stats, WindowSpec(30, 30))
    X = one_hot_design(t.x_cat[720:750], cont[720:750])
    expected = (X @ reg.model.coef + reg.model.intercept) * stats.std[4:] + stats.mean[4:]
    np.testing.assert_allclose(res.quantile(0.5), expected, rtol=1e-12)
    # identical inputs on two horizons give identical outputs; history is not consulted
    same = reg.predict(np.repeat(t.x_cat[720:721], 2, 0), np.repeat(cont[720:721], 2, 0))
    assert np.array_equal(same[0], same[1])
    shorter = dataclasses.replace(req, history=req.history.slice(len(req.history) - 1, len(req.history)))
    assert np.array_equal(forecast_sbf(reg, shorter, stats, WindowSpec(30, 30)).values, res.values)


# --- backtest -------------------------------------------------------------


def test_backtest_enumeration_and_brute_force():
    rng = np.random.default_rng(7)
    n_prefix, n_test, H = 30, 365, 60
    t = table(rng.uniform(50, 150, (n_prefix + n_test, 2)))
    r = backtest("rsf", persistence, t, identity_stats(("A", "B")), WindowSpec(30, H), eval_start=n_prefix)
    counts = r.records.groupby(["zone", "horizon"]).size()
    for h in range(1, H + 1):
        assert counts[("A", h)] == counts[("B", h)] == n_test - h + 1
    assert counts[("A", 60)] == 306
    # persistence stub: every horizon predicts the last observed day (as float32, like any model)
    last = t.demand.astype(np.float32).astype(np.float64)
    for (zone, h), cell in r.cells.set_index(["zone", "horizon"]).iterrows():
        z = t.zones.index(zone)
        errs = [abs(last[o - 1, z] - t.demand[o + h - 1, z]) / t.demand[o + h - 1, z]
                for o in range(n_prefix, len(t) - h + 1)]
        assert cell["mape"] == pytest.approx(100 * sum(errs) / len(errs), rel=1e-12)
    assert r.aggregate_mape == pytest.approx(r.cells["mape"].mean(), rel=1e-15)


def test_backtest_perfect_stub_and_minimum_length():
    t = table(np.full(100, 120.0))
    r = backtest("rsf", persistence, t, identity_stats(), WindowSpec(10, 15))
    assert (r.cells["mape"] == 0).all()
    with pytest.raises(DataError, match="at least 11"):
        backtest("rsf", persistence, t.slice(0, 10), identity_stats(), WindowSpec(10, 15))


def test_sbf_flat_curve_when_error_is_horizon_free():
    t = table(np.full(120, 100.0))

    class Const(Stub):
        uses_history = False

    sbf = Const(lambda cat, cont, y=None: torch.full(cont.shape[:2] + (1,), 90.0, dtype=torch.float32))
    r = backtest("sbf", sbf, t, identity_stats(), WindowSpec(10, 30))
    curve = r.mape_by_horizon().to_numpy()
    np.testing.assert_allclose(curve, 10.0, rtol=1e-12)


# --- reports --------------------------------------------------------------


@pytest.fixture(scope="module")
def reports():
    rng = np.random.default_rng(8)
    t = table(rng.uniform(80, 120, (120, 2)))
    stats = identity_stats(("A", "B"))
    spec = WindowSpec(10, 20)
    return [
        backtest("rsf", Stub(lambda c, x, y: y, spread=5.0), t, stats, spec),
        backtest("mmmpf", Stub(lambda c, x, y: y * 0 + 100.0, spread=15.0), t, stats, spec),
    ]


def test_emit_report_byte_identical(tmp_path, reports):
    a = emit_report(reports, tmp_path / "a")
    b = emit_report(list(reversed(reports)), tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes(), pa.name
    t1 = pd.read_csv(tmp_path / "a" / "table1.csv")
    assert t1[["model", "method"]].values.tolist() == [["stub", "mmmpf"], ["stub", "rsf"]]
    cells = pd.read_csv(tmp_path / "a" / "mape_cells.csv")
    assert list(cells.columns) == ["method", "model", "zone", "horizon", "mape", "n"]


def test_fan_chart_schema(tmp_path, reports):
    fan = fan_chart(reports[0])
    assert list(fan.columns) == ["zone", "date", "actual", "q05", "q50", "q95"]
    assert len(fan) == 2 * 20
    assert (fan["q05"] <= fan["q50"]).all() and (fan["q50"] <= fan["q95"]).all()
    with pytest.raises(DataError):
        fan_chart(reports[0], "1999-01-01")


def test_records_round_trip(tmp_path, reports):
    emit_report(reports, tmp_path)
    back = EvalReport.from_records_csv(tmp_path / "records_stub-rsf.csv")
    assert back.aggregate_mape == pytest.approx(reports[0].aggregate_mape, rel=1e-9)
    assert back.coverage == reports[0].coverage
