"""Quantile losses and the four training formulations.

* ``mmmpf``: masked multi-step training; the trailing block of demand values
  is hidden behind random fill and reconstructed from history plus the
  predictors on every day of the window.
* ``rsf``: one-step-ahead model on the history window (teacher forcing).
* ``dmf``: history window mapped straight to every forecast step, no future predictors.
* ``sbf``: per-day regression of demand on that day's predictors.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataio import FeatureTable
from .errors import ConfigError, TrainingError
from .models import LinearRegressor, SequenceModel
from .windowing import NormStats, WindowSet, apply_mask, normalize_table, sample_mask_length

logger = logging.getLogger(__name__)

METHODS = ("mmmpf", "rsf", "dmf", "sbf")


def _check_tau(tau) -> None:
    t = np.asarray(tau, dtype=np.float64)
    if np.any(t <= 0) or np.any(t >= 1):
        raise ValueError(f"quantile level must lie in (0, 1), got {tau}")


def pinball_loss(y, y_hat, tau: float, reduction: str = "mean"):
    """``(y_hat - y) * (1[y <= y_hat] - tau)``, averaged over elements by default."""
    _check_tau(tau)
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    loss = (y_hat - y) * ((y <= y_hat).astype(np.float64) - tau)
    if reduction == "mean":
        return float(loss.mean())
    if reduction == "none":
        return loss
    raise ValueError(f"unknown reduction {reduction!r}")


def pinball_grad(y, y_hat, tau: float):
    """Derivative of the pinball loss with respect to ``y_hat`` (away from the kink)."""
    _check_tau(tau)
    return np.where(np.asarray(y_hat) > np.asarray(y), 1.0 - tau, -tau)


def quantile_loss(pred: torch.Tensor, truth: torch.Tensor, taus: Sequence[float]) -> torch.Tensor:
    """Pinball loss of ``pred (..., Q)`` against ``truth (...)``: mean over cells, sum over levels."""
    _check_tau(taus)
    tau = torch.as_tensor(taus, dtype=pred.dtype)
    diff = pred - truth[..., None]
    loss = diff * ((diff >= 0).to(pred.dtype) - tau)
    return loss.reshape(-1, len(taus)).mean(dim=0).sum()


def masked_quantile_loss(pred, truth, mask, taus: Sequence[float]) -> torch.Tensor:
    """Quantile loss restricted to the masked steps of ``pred (B, L, M, Q)``.

    Mean over masked steps, batch and variables; sum over quantile levels.
    Predictions at unmasked steps do not enter the result.
    """
    pred = torch.as_tensor(pred)
    truth = torch.as_tensor(truth, dtype=pred.dtype)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if pred.dim() != 4 or truth.shape != pred.shape[:3] or mask.shape != pred.shape[1:2]:
        raise ValueError(
            f"inconsistent shapes pred={tuple(pred.shape)} truth={tuple(truth.shape)} mask={tuple(mask.shape)}"
        )
    if pred.shape[-1] != len(taus):
        raise ValueError("quantile axis does not match the number of levels")
    if not mask.any():
        raise ValueError("mask selects no steps")
    return quantile_loss(pred[:, mask], truth[:, mask], taus)


@dataclass(frozen=True)
class TrainingConfig:
    method: str = "mmmpf"
    learning_rate: float = 1e-3
    batch_size: int = 1000
    epochs: int = 1000
    seed: int = 0
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {list(METHODS)}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")

    @classmethod
    def desk(cls, method: str = "mmmpf", **overrides) -> TrainingConfig:
        """Reduced budget (100 epochs, batch 128) for laptop-scale runs."""
        return cls(**{"method": method, "epochs": 100, "batch_size": 128, **overrides})


@dataclass
class TrainingReport:
    method: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    backend: str = ""

    def write_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            fh.write(json.dumps({"method": self.method, "backend": self.backend}) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps(rec) + "\n")
            fh.write(json.dumps({"best_epoch": self.best_epoch, "best_val_loss": self.best_val_loss}) + "\n")


def backend_note() -> str:
    return (
        f"torch {torch.__version__} cpu threads={torch.get_num_threads()}; "
        "replays are bitwise on the same build and thread count"
    )


def _to_tensors(ws: WindowSet):
    return (
        torch.as_tensor(ws.cat, dtype=torch.long),
        torch.as_tensor(ws.cont, dtype=torch.float32),
        torch.as_tensor(ws.y, dtype=torch.float32),
    )


def _run(
    model: torch.nn.Module,
    n_train: int,
    batch_loss: Callable[[np.ndarray, np.random.Generator], torch.Tensor],
    val_loss: Callable[[], float] | None,
    config: TrainingConfig,
) -> TrainingReport:
    report = TrainingReport(config.method, backend=backend_note())
    rng = np.random.default_rng(config.seed)
    best_state = None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            model.train()
            perm = rng.permutation(n_train)
            total = 0.0
            for b in range(0, n_train, config.batch_size):
                idx = np.sort(perm[b : b + config.batch_size])
                loss = batch_loss(idx, rng)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"{config.method}: non-finite loss at epoch {epoch}, batch {b // config.batch_size}"
                        f" (previous epoch loss {report.epochs[-1]['train_loss'] if report.epochs else 'n/a'})"
                    )
                opt.zero_grad()
                loss.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                opt.step()
                total += loss.item() * len(idx)
            train_loss = total / n_train
            model.eval()
            with torch.no_grad():
                v = val_loss() if val_loss is not None else train_loss
            if not np.isfinite(v):
                raise TrainingError(f"{config.method}: non-finite validation loss at epoch {epoch}")
            report.epochs.append({
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": v,
                "wall_time": time.perf_counter() - start,
            })
            if v < report.best_val_loss:
                report.best_val_loss, report.best_epoch = v, epoch
                best_state = copy.deepcopy(model.state_dict())
            logger.debug("%s epoch %d train %.5f val %.5f", config.method, epoch, train_loss, v)
    model.load_state_dict(best_state)
    model.eval()
    logger.info("%s: best validation loss %.5f at epoch %d", config.method, report.best_val_loss, report.best_epoch)
    return report


def _require_sequence(model, method: str) -> None:
    if isinstance(model, LinearRegressor) or not getattr(model, "uses_history", False):
        raise ConfigError(f"{method} needs a history-aware sequence backbone, got {model.architecture}")


def _chunked(n: int, size: int = 2048):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def train_mmmpf(
    model: SequenceModel,
    windows: WindowSet,
    stats: NormStats,
    config: TrainingConfig,
    val_windows: WindowSet | None = None,
) -> tuple[SequenceModel, TrainingReport]:
    """Masked multi-step training on ``windows``.

    Each mini-batch draws one mask length, hides that many trailing demand
    steps behind random fill and scores the reconstruction on those steps.
    Validation always masks the full forecast block with a fill fixed across epochs.
    """
    if config.method != "mmmpf":
        raise ConfigError("train_mmmpf needs method='mmmpf'")
    _require_sequence(model, "mmmpf")
    taus = model.quantile_levels
    horizon = windows.spec.horizon
    use_indicator = model.config.mask_indicator

    def run(batch, mask, cat, cont):
        y = torch.as_tensor(batch.y, dtype=torch.float32)
        ind = torch.as_tensor(mask, dtype=torch.float32).expand(y.shape[:2]) if use_indicator else None
        pred = model(cat, cont, y, ind)
        return masked_quantile_loss(pred, torch.as_tensor(batch.target, dtype=torch.float32), mask, taus)

    cat_all = torch.as_tensor(windows.cat, dtype=torch.long)
    cont_all = torch.as_tensor(windows.cont, dtype=torch.float32)

    def batch_loss(idx, rng):
        l_m = sample_mask_length(rng, horizon)
        batch = apply_mask(windows.subset(idx), l_m, rng, stats)
        return run(batch, batch.mask, cat_all[idx], cont_all[idx])

    val_fn = None
    if val_windows is not None:
        val_batch = apply_mask(val_windows, horizon, np.random.default_rng([config.seed, 1]), stats)
        v_cat, v_cont, _ = _to_tensors(val_windows)

        def val_fn():
            total = 0.0
            for sl in _chunked(len(val_windows)):
                part = _SliceBatch(val_batch, sl)
                total += run(part, val_batch.mask, v_cat[sl], v_cont[sl]).item() * (sl.stop - sl.start)
            return total / len(val_windows)

    report = _run(model, len(windows), batch_loss, val_fn, config)
    return model, report


@dataclass
class _SliceBatch:
    base: object
    sl: slice

    @property
    def y(self):
        return self.base.y[self.sl]

    @property
    def target(self):
        return self.base.target[self.sl]


def train_rsf(
    model: SequenceModel,
    windows: WindowSet,
    config: TrainingConfig,
    val_windows: WindowSet | None = None,
) -> tuple[SequenceModel, TrainingReport]:
    """One-step-ahead training: the ``history`` steps predict the next day's demand.

    Only the first ``history + 1`` steps of each window are used; the loss sits
    on the single predicted step.
    """
    if config.method != "rsf":
        raise ConfigError("train_rsf needs method='rsf'")
    _require_sequence(model, "rsf")
    taus = model.quantile_levels
    T = windows.spec.history

    def loss_on(cat, cont, y):
        pred = model(cat[:, :T], cont[:, :T], y[:, :T])[:, -1]
        return quantile_loss(pred, y[:, T], taus)

    cat, cont, y = _to_tensors(windows)
    val_fn = None
    if val_windows is not None:
        vt = _to_tensors(val_windows)

        def val_fn():
            return _chunked_mean(len(val_windows), lambda sl: loss_on(*(t[sl] for t in vt)))

    report = _run(model, len(windows), lambda idx, rng: loss_on(cat[idx], cont[idx], y[idx]), val_fn, config)
    return model, report


def train_dmf(
    model: SequenceModel,
    windows: WindowSet,
    config: TrainingConfig,
    val_windows: WindowSet | None = None,
) -> tuple[SequenceModel, TrainingReport]:
    """Direct multi-step training from the history steps only."""
    if config.method != "dmf":
        raise ConfigError("train_dmf needs method='dmf'")
    _require_sequence(model, "dmf")
    if model.direct_horizon != windows.spec.horizon:
        raise ConfigError(
            f"model direct horizon {model.direct_horizon} != window horizon {windows.spec.horizon}"
        )
    taus = model.quantile_levels
    T = windows.spec.history

    def loss_on(cat, cont, y):
        pred = model.forward_direct(cat[:, :T], cont[:, :T], y[:, :T])
        return quantile_loss(pred, y[:, T:], taus)

    cat, cont, y = _to_tensors(windows)
    val_fn = None
    if val_windows is not None:
        vt = _to_tensors(val_windows)

        def val_fn():
            return _chunked_mean(len(val_windows), lambda sl: loss_on(*(t[sl] for t in vt)))

    report = _run(model, len(windows), lambda idx, rng: loss_on(cat[idx], cont[idx], y[idx]), val_fn, config)
    return model, report


def _chunked_mean(n: int, fn: Callable[[slice], torch.Tensor]) -> float:
    total = 0.0
    for sl in _chunked(n):
        total += fn(sl).item() * (sl.stop - sl.start)
    return total / n


def train_sbf(
    regressor,
    table: FeatureTable,
    stats: NormStats,
    config: TrainingConfig,
    val_table: FeatureTable | None = None,
):
    """Fit a per-day regressor ``x_t -> y_t`` on every day of ``table``.

    Linear variants are fitted in closed form (or coordinate descent) on
    squared error; the FCNN is trained with the quantile loss.
    """
    if config.method != "sbf":
        raise ConfigError("train_sbf needs method='sbf'")
    cont, y = normalize_table(table, stats)
    cat = table.x_cat
    if isinstance(regressor, LinearRegressor):
        regressor.fit(cat, cont, y)
        resid = regressor.predict(cat, cont)[..., 0] - y
        report = TrainingReport("sbf", backend=backend_note())
        mse = float(np.mean(resid**2))
        val = mse
        if val_table is not None:
            vc, vy = normalize_table(val_table, stats)
            val = float(np.mean((regressor.predict(val_table.x_cat, vc)[..., 0] - vy) ** 2))
        report.epochs.append({"epoch": 1, "train_loss": mse, "val_loss": val, "wall_time": 0.0})
        report.best_epoch, report.best_val_loss = 1, val
        return regressor, report

    if regressor.uses_history:
        raise ConfigError(f"sbf needs a per-day regressor (fcnn or linear), got {regressor.architecture}")
    taus = regressor.quantile_levels

    def tensors(c, x, t):
        return (
            torch.as_tensor(c[:, None], dtype=torch.long),
            torch.as_tensor(x[:, None], dtype=torch.float32),
            torch.as_tensor(t, dtype=torch.float32),
        )

    cat_t, cont_t, y_t = tensors(cat, cont, y)

    def loss_on(c, x, t):
        return quantile_loss(regressor(c, x)[:, 0], t, taus)

    val_fn = None
    if val_table is not None:
        vc, vy = normalize_table(val_table, stats)
        vt = tensors(val_table.x_cat, vc, vy)

        def val_fn():
            return loss_on(*vt).item()

    report = _run(regressor, len(table), lambda idx, rng: loss_on(cat_t[idx], cont_t[idx], y_t[idx]), val_fn, config)
    return regressor, report
