import numpy as np
import pandas as pd
import pytest

from maskcast.dataio import HOURLY_COLUMNS, SyntheticSpec, generate_synthetic


def hourly_frame(dates, zones, rng=None, demand=None):
    """Hourly table in canonical columns for every (date, hour, zone)."""
    rng = rng or np.random.default_rng(0)
    days = pd.to_datetime(pd.Index(dates))
    idx = pd.MultiIndex.from_product([days, range(1, 25), zones], names=["date", "hour", "zone"])
    df = idx.to_frame(index=False)
    n = len(df)
    df["demand_mw"] = demand if demand is not None else rng.uniform(100, 200, n)
    df["dry_bulb_f"] = rng.uniform(20, 90, n)
    df["dew_point_f"] = df["dry_bulb_f"] - rng.uniform(0, 15, n)
    return df[list(HOURLY_COLUMNS)]


def write_hourly_csv(path, df):
    out = df.copy()
    out["date"] = pd.to_datetime(out["date"]).dt.strftime("%Y-%m-%d")
    out.to_csv(path, index=False)
    return path


@pytest.fixture(scope="session")
def small_table():
    return generate_synthetic(SyntheticSpec(n_days=400, n_zones=2, seed=3))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains real models for minutes (acceptance criteria 4, 5, 7)")


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    outcome = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance.py::test_c" not in getattr(rep, "nodeid", ""):
                continue
            prev = outcome.get(rep.nodeid)
            if prev is None or rep.outcome != "passed":
                detail = dict(rep.user_properties).get("detail", "")
                if not detail and rep.outcome != "passed":
                    crash = getattr(rep.longrepr, "reprcrash", None)
                    detail = f"{rep.when}: {crash.message.splitlines()[0] if crash else 'error'}"
                outcome[rep.nodeid] = (rep.outcome, detail or (prev[1] if prev else ""))
    if not outcome:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(outcome):
        name = nodeid.split("::")[-1]
        status, detail = outcome[nodeid]
        terminalreporter.write_line(f"{'PASS' if status == 'passed' else 'FAIL'}  {name}  {detail}")
