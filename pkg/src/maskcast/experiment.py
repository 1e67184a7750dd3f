"""Glue that trains any formulation from a dataset split."""

from __future__ import annotations

import dataclasses

from .dataio import DatasetSplit
from .errors import ConfigError
from .models import (
    LINEAR_ARCHITECTURES,
    Checkpoint,
    InputLayout,
    ModelConfig,
    build_model,
    build_regressor,
)
from .training import TrainingConfig, TrainingReport, train_dmf, train_mmmpf, train_rsf, train_sbf
from .windowing import WindowSpec, compute_norm_stats, make_windows


def train_formulation(
    split: DatasetSplit,
    model_config: ModelConfig,
    spec: WindowSpec,
    config: TrainingConfig,
) -> tuple[Checkpoint, TrainingReport]:
    """Fit normalisation on the training split, build windows for ``config.method`` and train.

    RSF trains on ``history + 1`` day windows (one target each); MMMPF and DMF
    on full ``history + horizon`` windows; SBF on individual days.
    """
    method = config.method
    stats = compute_norm_stats(split.train)
    layout = InputLayout.for_zones(split.train.n_zones)
    arch = model_config.architecture

    if method == "sbf":
        if arch in LINEAR_ARCHITECTURES:
            model = build_regressor(model_config, layout)
        elif arch == "fcnn":
            model = build_model(model_config, layout)
        else:
            raise ConfigError(f"sbf uses fcnn or linear regressors, not {arch}")
        model, report = train_sbf(model, split.train, stats, config, split.validation)
    else:
        if arch in LINEAR_ARCHITECTURES or arch == "fcnn":
            raise ConfigError(f"{method} needs a sequence backbone (lstm, tcn, transformer), not {arch}")
        if method == "rsf":
            wspec = dataclasses.replace(spec, horizon=1)
            model = build_model(model_config, layout)
            train, val = make_windows(split.train, wspec, stats), make_windows(split.validation, wspec, stats)
            model, report = train_rsf(model, train, config, val)
        else:
            direct = spec.horizon if method == "dmf" else None
            model = build_model(model_config, layout, direct_horizon=direct)
            train, val = make_windows(split.train, spec, stats), make_windows(split.validation, spec, stats)
            if method == "mmmpf":
                model, report = train_mmmpf(model, train, stats, config, val)
            else:
                model, report = train_dmf(model, train, config, val)

    ckpt = Checkpoint(
        model, method, stats, spec,
        extra={"best_val_loss": report.best_val_loss, "best_epoch": report.best_epoch,
               "training": dataclasses.asdict(config)},
    )
    return ckpt, report
