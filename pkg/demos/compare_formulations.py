"""
Four ways to forecast 30 days ahead
-----------------------------------

Trains the same LSTM backbone as a masked forecaster (mmmpf), a one-step
model rolled out recursively (rsf) and a direct multi-output head (dmf),
plus a per-day ridge regression (sbf). Every model is backtested from each
day of the test year and the per-horizon MAPE curves are printed side by side.

The recursive curve climbs with the horizon as its own errors feed back,
the direct head cannot see future weather at all, and the per-day
regressor is flat because it ignores history.

Run with ``python3 demos/compare_formulations.py [out_dir]``; takes a few minutes.
"""

import sys

import pandas as pd

from maskcast.dataio import SyntheticSpec, concat_tables, generate_synthetic, split_dataset
from maskcast.experiment import train_formulation
from maskcast.forecast_eval import backtest, emit_report
from maskcast.models import ModelConfig
from maskcast.training import TrainingConfig
from maskcast.windowing import WindowSpec

out_dir = sys.argv[1] if len(sys.argv) > 1 else "demo_reports"
spec = SyntheticSpec(n_days=2000, n_zones=2, future_signal_weight=3.0, autoregressive_weight=0.7, seed=1)
split = split_dataset(generate_synthetic(spec), n_pretest_days=2000 - 365)
window = WindowSpec(30, 30)

# the first origins of the test year need history from the end of validation
n_val = len(split.validation)
test = concat_tables([split.validation.slice(n_val - 60, n_val), split.test])

reports = []
for method, arch in [("mmmpf", "lstm"), ("rsf", "lstm"), ("dmf", "lstm"), ("sbf", "linear-ridge")]:
    ckpt, _ = train_formulation(split, ModelConfig(arch, seed=1), window, TrainingConfig.desk(method, epochs=40, seed=1))
    r = backtest(method, ckpt.model, test, ckpt.stats, window, eval_start=60, seed=1)
    print(f"{r.tag:20s} aggregate MAPE {r.aggregate_mape:6.2f}")
    reports.append(r)

curves = pd.DataFrame({r.method: r.mape_by_horizon() for r in reports})
print(curves.iloc[[0, 4, 9, 14, 19, 24, 29]].round(2))
emit_report(reports, out_dir, plot=False)
print(f"report files in {out_dir}/")
