import json

import pandas as pd
import pytest

from conftest import hourly_frame, write_hourly_csv
from maskcast.cli import main
from maskcast.config import ExperimentConfig
from maskcast.errors import ConfigError

ZONES = ["CT", "ME", "NH", "RI", "VT", "SEMA", "WCMA", "NEMA"]


def write_config(path, **overrides):
    doc = {
        "version": 1,
        "name": "t",
        "seed": 0,
        "data": {"synthetic": {"n_days": 420, "n_zones": 2, "seed": 1}},
        "split": {"n_pretest_days": 360},
        "window": {"history": 7, "horizon": 7},
        "model": {"architecture": "lstm", "hyperparameters": {"hidden_size": 8, "num_layers": 1}},
        "training": {"method": "mmmpf", "epochs": 2, "batch_size": 64},
    }
    doc.update(overrides)
    path.write_text(json.dumps(doc))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_ingest_eight_zones_and_rerun_bytes(tmp_path, capsys):
    df = hourly_frame(pd.date_range("2021-01-01", periods=3), ZONES)
    raw = write_hourly_csv(tmp_path / "raw.csv", df)
    assert run("--out", tmp_path / "o", "ingest", raw) == 0
    out = capsys.readouterr().out
    assert "8 zones" in out
    first = (tmp_path / "o" / "dataset.csv").read_bytes()
    assert run("--out", tmp_path / "o", "ingest", raw) == 0
    assert (tmp_path / "o" / "dataset.csv").read_bytes() == first


def test_usage_and_data_exit_codes(tmp_path):
    assert run("ingest") == 1
    assert run("--out", tmp_path, "ingest", tmp_path / "missing.csv") == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("date,hour,zone,demand_mw,dry_bulb_f,dew_point_f\n2021-01-01,30,CT,1,2,1\n")
    assert run("--out", tmp_path, "ingest", bad) == 2
    assert run("frobnicate") == 1
    assert run("--config", tmp_path / "nope.json", "train") == 1
    cfg = write_config(tmp_path / "c.json")
    assert run("--config", cfg, "train", "--method", "foo") == 1


def test_unknown_method_in_config_lists_choices(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", training={"method": "foo"})
    assert run("--config", cfg, "--out", tmp_path, "train") == 1
    assert "['mmmpf', 'rsf', 'dmf', 'sbf']" in capsys.readouterr().err


@pytest.mark.parametrize("patch, msg", [
    ({"bogus": 1}, "unknown top-level"),
    ({"version": 2}, "version"),
    ({"window": {"history": 7, "horizn": 7}}, "unknown keys in window"),
    ({"model": {"architecture": "lstm", "seed": 3}}, "top level"),
    ({"seed": None}, "seed is required"),
    ({"data": {}}, "exactly one"),
])
def test_config_strictness(tmp_path, patch, msg):
    cfg = write_config(tmp_path / "c.json", **patch)
    with pytest.raises(ConfigError, match=msg):
        ExperimentConfig.load(cfg)


def test_seed_flag_satisfies_missing_seed(tmp_path):
    cfg = write_config(tmp_path / "c.json", seed=None)
    assert ExperimentConfig.load(cfg, seed=5).training.seed == 5


def test_synth_writes_dataset(tmp_path):
    dest = tmp_path / "s.csv"
    assert run("--seed", 3, "synth", "--days", 50, "--zones", 3, "--dataset", dest) == 0
    df = pd.read_csv(dest)
    assert len(df) == 150 and df["zone"].nunique() == 3


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = write_config(root / "c.json")
    outs = []
    for name in ("a", "b"):
        out = root / name
        for method in ("mmmpf", "rsf", "dmf"):
            assert run("--config", cfg, "--out", out, "train", "--method", method) == 0
        assert run("--config", cfg, "--out", out, "train", "--method", "sbf", "--model", "linear-ridge") == 0
        assert run("--config", cfg, "--out", out, "backtest", "--all") == 0
        assert run("--config", cfg, "--out", out, "forecast", "--origin", "2012-02-01", "--length", 7) == 0
        outs.append(out / "t")
    return cfg, outs


def test_pipeline_layout_and_table(pipeline):
    _, (a, _) = pipeline
    assert {p.name for p in a.iterdir()} == {"checkpoints", "reports", "logs"}
    t1 = pd.read_csv(a / "reports" / "table1.csv")
    assert len(t1) == 4 and set(t1["method"]) == {"mmmpf", "rsf", "dmf", "sbf"}
    fc = pd.read_csv(a / "reports" / "forecast_lstm-mmmpf_2012-02-01_7.csv")
    assert len(fc) == 14 and list(fc.columns[:4]) == ["zone", "date", "horizon", "actual"]


def test_pipeline_byte_identical(pipeline):
    _, (a, b) = pipeline
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.parent.name != "logs")
    assert len(files) > 10
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_train_resume_and_force(pipeline, capsys):
    cfg, (a, _) = pipeline
    out = a.parent
    assert run("--config", cfg, "--out", out, "train") == 0
    assert "up to date" in capsys.readouterr().out
    before = json.loads((a / "logs" / "lstm-mmmpf.epochs.jsonl").read_text().splitlines()[-1])
    assert run("--config", cfg, "--out", out, "train", "--force") == 0
    after = json.loads((a / "logs" / "lstm-mmmpf.epochs.jsonl").read_text().splitlines()[-1])
    assert before == after


def test_forecast_and_backtest_errors(pipeline, tmp_path):
    cfg, (a, _) = pipeline
    out = a.parent
    assert run("--config", cfg, "--out", out, "forecast", "--origin", "2012-02-01", "--length", 0) == 1
    assert run("--config", cfg, "--out", out, "forecast", "--origin", "2012-02-20", "--length", 7) == 2
    assert run("--config", cfg, "--out", out, "backtest", "--checkpoint", tmp_path / "x.pt") == 2
    other = write_config(tmp_path / "w.json", window={"history": 5, "horizon": 7})
    assert run("--config", other, "--out", out, "backtest", "--checkpoint",
               a / "checkpoints" / "lstm-mmmpf.pt") == 1


def test_report_rebuilds(pipeline, tmp_path):
    _, (a, _) = pipeline
    src = tmp_path / "rep"
    src.mkdir()
    for f in (a / "reports").glob("records_*.csv"):
        (src / f.name).write_bytes(f.read_bytes())
    assert run("report", "--reports", src) == 0
    for name in ("table1.csv", "mape_cells.csv", "mape_by_horizon.csv", "summary.json"):
        assert (src / name).read_bytes() == (a / "reports" / name).read_bytes(), name
    assert run("report", "--reports", src, "--max-horizon", 3) == 0
    assert pd.read_csv(src / "mape_by_horizon.csv")["horizon"].max() == 3
