"""Sequence backbones with quantile heads, plus linear sample-based regressors."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SEQUENCE_ARCHITECTURES = ("lstm", "tcn", "transformer", "fcnn")
LINEAR_ARCHITECTURES = ("linear-o", "linear-ridge", "linear-lasso")
ARCHITECTURES = SEQUENCE_ARCHITECTURES + LINEAR_ARCHITECTURES
CAUSAL_ARCHITECTURES = ("lstm", "tcn")

DEFAULT_HYPERPARAMETERS: dict[str, dict[str, Any]] = {
    "lstm": {"hidden_size": 50, "num_layers": 2},
    "tcn": {"channels": [50, 50], "kernel_size": 3, "dropout": 0.2},
    "transformer": {
        "d_model": 64,
        "dim_feedforward": 256,
        "nhead": 4,
        "num_layers": 2,
        "dropout": 0.1,
    },
    "fcnn": {"hidden_sizes": [50, 50]},
    "linear-o": {},
    "linear-ridge": {"alpha": 1.0},
    "linear-lasso": {"alpha": 0.01},
}

# month 1..12, day of month 1..31, day of week 0..6 (index 0 unused for the first two)
CATEGORICAL_CARDINALITIES = (13, 32, 7)


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "lstm"
    hyperparameters: Mapping[str, Any] = field(default_factory=dict)
    embedding_dim: int = 5
    quantile_levels: tuple[float, ...] = (0.05, 0.5, 0.95)
    mask_indicator: bool = False
    separate_quantile_models: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(
                f"unknown architecture {self.architecture!r}; choose from {list(ARCHITECTURES)}"
            )
        taus = tuple(float(t) for t in self.quantile_levels)
        object.__setattr__(self, "quantile_levels", taus)
        if not taus or any(not 0 < t < 1 for t in taus):
            raise ConfigError("quantile levels must lie in (0, 1)")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ConfigError("quantile levels must be strictly increasing")
        unknown = set(self.hyperparameters) - set(DEFAULT_HYPERPARAMETERS[self.architecture])
        if unknown:
            raise ConfigError(f"unknown {self.architecture} hyperparameters: {sorted(unknown)}")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")

    @property
    def params(self) -> dict[str, Any]:
        return {**DEFAULT_HYPERPARAMETERS[self.architecture], **self.hyperparameters}

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["hyperparameters"] = dict(self.hyperparameters)
        d["quantile_levels"] = list(self.quantile_levels)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "quantile_levels" in d:
            d["quantile_levels"] = tuple(d["quantile_levels"])
        return cls(**d)


@dataclass(frozen=True)
class InputLayout:
    """Per-step input layout shared by every backbone."""

    n_predictors: int
    n_forecast: int
    cat_cardinalities: tuple[int, ...] = CATEGORICAL_CARDINALITIES

    @classmethod
    def for_zones(cls, n_zones: int) -> InputLayout:
        return cls(n_predictors=2 * n_zones, n_forecast=n_zones)


# ---------------------------------------------------------------------------
# Backbones: (B, L, in_dim) -> (B, L, out_dim)
# ---------------------------------------------------------------------------


class LSTMBackbone(nn.Module):
    def __init__(self, in_dim: int, hidden_size: int, num_layers: int):
        super().__init__()
        self.rnn = nn.LSTM(in_dim, hidden_size, num_layers=num_layers, batch_first=True)
        self.out_dim = hidden_size

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.rnn(h)[0]


class _CausalConvLayer(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, dilation: int, dropout: float):
        super().__init__()
        self.pad = (kernel_size - 1) * dilation
        self.conv = nn.Conv1d(in_ch, out_ch, kernel_size, stride=1, dilation=dilation)
        self.dropout = nn.Dropout(dropout)
        self.residual = nn.Conv1d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        out = self.conv(nn.functional.pad(h, (self.pad, 0)))
        out = self.dropout(torch.relu(out))
        return torch.relu(out + self.residual(h))


class TCNBackbone(nn.Module):
    """Causal dilated convolutions, dilation ``2**i`` at layer ``i``, one conv per layer."""

    def __init__(self, in_dim: int, channels: Sequence[int], kernel_size: int, dropout: float):
        super().__init__()
        layers = []
        prev = in_dim
        for i, ch in enumerate(channels):
            layers.append(_CausalConvLayer(prev, ch, kernel_size, 2**i, dropout))
            prev = ch
        self.layers = nn.Sequential(*layers)
        self.out_dim = prev
        self.receptive_field = 1 + sum((kernel_size - 1) * 2**i for i in range(len(channels)))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.layers(h.transpose(1, 2)).transpose(1, 2)


def sinusoidal_encoding(length: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float32) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(length, d_model)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: d_model // 2])
    return pe


class TransformerBackbone(nn.Module):
    """Encoder-only stack with unmasked (bidirectional) self-attention."""

    max_len = 2048

    def __init__(self, in_dim: int, d_model: int, dim_feedforward: int, nhead: int,
                 num_layers: int, dropout: float):
        super().__init__()
        self.proj = nn.Linear(in_dim, d_model)
        self.register_buffer("pe", sinusoidal_encoding(self.max_len, d_model), persistent=False)
        layer = nn.TransformerEncoderLayer(
            d_model, nhead, dim_feedforward, dropout, batch_first=True
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers, enable_nested_tensor=False)
        self.out_dim = d_model

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        L = h.shape[1]
        if L > self.max_len:
            raise ValueError(f"sequence length {L} exceeds {self.max_len}")
        return self.encoder(self.proj(h) + self.pe[:L])


class MLPBackbone(nn.Module):
    """Per-step fully connected network (no temporal mixing)."""

    def __init__(self, in_dim: int, hidden_sizes: Sequence[int]):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for width in hidden_sizes:
            layers += [nn.Linear(prev, width), nn.ReLU()]
            prev = width
        self.net = nn.Sequential(*layers)
        self.out_dim = prev

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h)


# ---------------------------------------------------------------------------
# Sequence model
# ---------------------------------------------------------------------------


class SequenceModel(nn.Module):
    """Embeddings + backbone + per-step quantile head.

    ``forward(cat, cont, y)`` maps ``(B, L, 3)`` calendar codes, ``(B, L, P)``
    normalised predictors and ``(B, L, M)`` normalised demand to
    ``(B, L, M, Q)`` quantile predictions.  When built with
    ``direct_horizon``, :meth:`forward_direct` additionally maps a history
    sequence to ``direct_horizon`` future steps from the final hidden state.
    """

    def __init__(self, config: ModelConfig, layout: InputLayout, direct_horizon: int | None = None):
        super().__init__()
        if config.architecture not in SEQUENCE_ARCHITECTURES:
            raise ConfigError(f"{config.architecture} is not a sequence architecture")
        self.config = config
        self.layout = layout
        self.direct_horizon = direct_horizon
        self.n_quantiles = len(config.quantile_levels)
        self.embeddings = nn.ModuleList(
            nn.Embedding(card, config.embedding_dim) for card in layout.cat_cardinalities
        )
        self.uses_history = config.architecture != "fcnn"
        in_dim = len(layout.cat_cardinalities) * config.embedding_dim + layout.n_predictors
        if self.uses_history:
            in_dim += layout.n_forecast + int(config.mask_indicator)
        p = config.params
        arch = config.architecture
        if arch == "lstm":
            self.backbone = LSTMBackbone(in_dim, p["hidden_size"], p["num_layers"])
        elif arch == "tcn":
            self.backbone = TCNBackbone(in_dim, p["channels"], p["kernel_size"], p["dropout"])
        elif arch == "transformer":
            self.backbone = TransformerBackbone(
                in_dim, p["d_model"], p["dim_feedforward"], p["nhead"], p["num_layers"], p["dropout"]
            )
        else:
            self.backbone = MLPBackbone(in_dim, p["hidden_sizes"])
        out = layout.n_forecast * self.n_quantiles
        self.head = nn.Linear(self.backbone.out_dim, out)
        self.direct_head = (
            nn.Linear(self.backbone.out_dim, direct_horizon * out) if direct_horizon else None
        )

    @property
    def architecture(self) -> str:
        return self.config.architecture

    @property
    def quantile_levels(self) -> tuple[float, ...]:
        return self.config.quantile_levels

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_layout(self, cat, cont, y):
        B, L = cat.shape[:2]
        lay = self.layout
        if cat.shape != (B, L, len(lay.cat_cardinalities)):
            raise ValueError(f"categorical input shape {tuple(cat.shape)} does not match layout")
        if cont.shape != (B, L, lay.n_predictors):
            raise ValueError(f"predictor input shape {tuple(cont.shape)}, expected {(B, L, lay.n_predictors)}")
        if y is not None and y.shape != (B, L, lay.n_forecast):
            raise ValueError(f"forecast input shape {tuple(y.shape)}, expected {(B, L, lay.n_forecast)}")

    def features(self, cat, cont, y=None, indicator=None) -> torch.Tensor:
        self._check_layout(cat, cont, y)
        parts = [emb(cat[..., i]) for i, emb in enumerate(self.embeddings)]
        parts.append(cont)
        if self.uses_history:
            if y is None:
                raise ValueError(f"{self.architecture} model requires the forecast-variable input")
            parts.append(y)
            if self.config.mask_indicator:
                if indicator is None:
                    indicator = torch.zeros(y.shape[:2], dtype=y.dtype)
                parts.append(indicator[..., None].to(y.dtype))
        return torch.cat(parts, dim=-1)

    def forward(self, cat, cont, y=None, indicator=None) -> torch.Tensor:
        h = self.backbone(self.features(cat, cont, y, indicator))
        out = self.head(h)
        return out.view(*out.shape[:2], self.layout.n_forecast, self.n_quantiles)

    def forward_direct(self, cat, cont, y) -> torch.Tensor:
        if self.direct_head is None:
            raise ValueError("model was built without a direct multi-step head")
        h = self.backbone(self.features(cat, cont, y))[:, -1]
        out = self.direct_head(h)
        return out.view(out.shape[0], self.direct_horizon, self.layout.n_forecast, self.n_quantiles)


class QuantileEnsemble(nn.Module):
    """One independent :class:`SequenceModel` per quantile level, stacked on the last axis."""

    def __init__(self, config: ModelConfig, layout: InputLayout, direct_horizon: int | None = None):
        super().__init__()
        self.config = config
        self.layout = layout
        self.direct_horizon = direct_horizon
        self.members = nn.ModuleList(
            SequenceModel(dataclasses.replace(config, quantile_levels=(tau,), separate_quantile_models=False),
                          layout, direct_horizon)
            for tau in config.quantile_levels
        )
        self.uses_history = self.members[0].uses_history

    architecture = SequenceModel.architecture
    quantile_levels = SequenceModel.quantile_levels
    n_parameters = SequenceModel.n_parameters

    def forward(self, cat, cont, y=None, indicator=None) -> torch.Tensor:
        return torch.cat([m(cat, cont, y, indicator) for m in self.members], dim=-1)

    def forward_direct(self, cat, cont, y) -> torch.Tensor:
        return torch.cat([m.forward_direct(cat, cont, y) for m in self.members], dim=-1)


def build_model(
    config: ModelConfig, layout: InputLayout, *, direct_horizon: int | None = None
) -> SequenceModel | QuantileEnsemble:
    """Freshly initialised sequence model, seeded by ``config.seed``."""
    if config.architecture not in SEQUENCE_ARCHITECTURES:
        raise ConfigError(
            f"{config.architecture!r} is not a trainable sequence architecture; "
            f"choose from {list(SEQUENCE_ARCHITECTURES)} or use fit_linear"
        )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        cls = QuantileEnsemble if config.separate_quantile_models else SequenceModel
        model = cls(config, layout, direct_horizon)
    logger.info("built %s model with %d parameters", config.architecture, model.n_parameters)
    return model


# ---------------------------------------------------------------------------
# Linear regressors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearModel:
    variant: str
    coef: np.ndarray
    intercept: np.ndarray
    alpha: float = 0.0

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.coef + self.intercept


def _lasso_cd(X: np.ndarray, y: np.ndarray, alpha: float, tol: float, max_iter: int) -> np.ndarray:
    n, p = X.shape
    w = np.zeros(p)
    col_sq = (X**2).sum(axis=0) / n
    resid = y.copy()
    for _ in range(max_iter):
        max_step = 0.0
        for j in range(p):
            if col_sq[j] == 0:
                continue
            old = w[j]
            rho = X[:, j] @ resid / n + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - alpha, 0.0) / col_sq[j]
            if new != old:
                resid -= X[:, j] * (new - old)
                w[j] = new
                max_step = max(max_step, abs(new - old))
        if max_step < tol:
            return w
    logger.warning("lasso coordinate descent hit max_iter=%d", max_iter)
    return w


def fit_linear(
    variant: str,
    X: np.ndarray,
    y: np.ndarray,
    regularization: float | None = None,
    *,
    fit_intercept: bool = True,
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> LinearModel:
    """Least-squares fit.

    ``ols`` solves the unpenalised problem exactly, ``ridge`` minimises
    ``||y - Xw||^2 + alpha ||w||^2`` and ``lasso`` minimises
    ``||y - Xw||^2 / (2n) + alpha ||w||_1`` by cyclic coordinate descent until
    no coefficient moves by more than ``tol``.  The intercept is never penalised.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    squeeze = y.ndim == 1
    Y = y[:, None] if squeeze else y
    n, p = X.shape
    if fit_intercept:
        x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
    else:
        x_mean, y_mean = np.zeros(p), np.zeros(Y.shape[1])
    Xc, Yc = X - x_mean, Y - y_mean

    if variant == "ols":
        if n < p:
            raise DataError(f"ols needs rows >= columns ({n} < {p}); use ridge")
        if np.linalg.matrix_rank(Xc) < p:
            raise DataError("design matrix is singular; ols undefined (use ridge)")
        coef = np.linalg.lstsq(Xc, Yc, rcond=None)[0]
        alpha = 0.0
    elif variant == "ridge":
        alpha = 1.0 if regularization is None else float(regularization)
        coef = np.linalg.solve(Xc.T @ Xc + alpha * np.eye(p), Xc.T @ Yc)
    elif variant == "lasso":
        alpha = 0.01 if regularization is None else float(regularization)
        coef = np.stack([_lasso_cd(Xc, Yc[:, j].copy(), alpha, tol, max_iter) for j in range(Y.shape[1])], axis=1)
    else:
        raise ConfigError(f"unknown linear variant {variant!r}")

    intercept = y_mean - x_mean @ coef
    if squeeze:
        coef, intercept = coef[:, 0], intercept[0]
    return LinearModel(variant, coef, np.asarray(intercept), alpha)


def one_hot_design(cat: np.ndarray, cont: np.ndarray) -> np.ndarray:
    """Drop-first one-hot calendar codes next to normalised continuous predictors."""
    cat = np.asarray(cat)
    blocks = []
    lows = (1, 1, 0)
    for i, (card, low) in enumerate(zip(CATEGORICAL_CARDINALITIES, lows)):
        levels = np.arange(low + 1, card)
        blocks.append((cat[..., i, None] == levels).astype(np.float64))
    blocks.append(np.asarray(cont, dtype=np.float64))
    return np.concatenate(blocks, axis=-1)


_VARIANTS = {"linear-o": "ols", "linear-ridge": "ridge", "linear-lasso": "lasso"}


@dataclass
class LinearRegressor:
    """Sample-based point regressor on one day's predictors; quantiles all equal the point forecast."""

    config: ModelConfig
    layout: InputLayout
    model: LinearModel | None = None

    uses_history = False

    @property
    def architecture(self) -> str:
        return self.config.architecture

    @property
    def quantile_levels(self) -> tuple[float, ...]:
        return self.config.quantile_levels

    def fit(self, cat: np.ndarray, cont: np.ndarray, y: np.ndarray) -> LinearRegressor:
        variant = _VARIANTS[self.config.architecture]
        self.model = fit_linear(variant, one_hot_design(cat, cont), y, self.config.params.get("alpha"))
        return self

    def predict(self, cat: np.ndarray, cont: np.ndarray) -> np.ndarray:
        """Normalised predictions with a trailing quantile axis, ``(..., M, Q)``."""
        if self.model is None:
            raise RuntimeError("regressor is not fitted")
        pred = self.model.predict(one_hot_design(cat, cont))
        return np.repeat(pred[..., None], len(self.quantile_levels), axis=-1)


def build_regressor(config: ModelConfig, layout: InputLayout) -> LinearRegressor:
    if config.architecture not in LINEAR_ARCHITECTURES:
        raise ConfigError(f"{config.architecture!r} is not a linear architecture")
    return LinearRegressor(config, layout)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model: Any
    method: str
    stats: Any
    window: Any
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def tag(self) -> str:
        return f"{self.model.architecture}-{self.method}"


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    model = ckpt.model
    blob: dict[str, Any] = {
        "version": CHECKPOINT_VERSION,
        "architecture": model.architecture,
        "method": ckpt.method,
        "model_config": model.config.to_dict(),
        "layout": dataclasses.asdict(model.layout),
        "quantile_levels": list(model.quantile_levels),
        "norm_stats": ckpt.stats.to_dict(),
        "window": dataclasses.asdict(ckpt.window),
        "extra": ckpt.extra,
    }
    if isinstance(model, LinearRegressor):
        blob["linear"] = {
            "variant": model.model.variant,
            "coef": torch.as_tensor(model.model.coef),
            "intercept": torch.as_tensor(model.model.intercept),
            "alpha": model.model.alpha,
        }
    else:
        blob["direct_horizon"] = model.direct_horizon
        blob["state_dict"] = model.state_dict()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(blob, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    from .windowing import NormStats, WindowSpec

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {blob.get('version')}")
    config = ModelConfig.from_dict(blob["model_config"])
    lay = blob["layout"]
    layout = InputLayout(lay["n_predictors"], lay["n_forecast"], tuple(lay["cat_cardinalities"]))
    if "linear" in blob:
        lin = blob["linear"]
        model = LinearRegressor(
            config, layout,
            LinearModel(lin["variant"], lin["coef"].numpy(), lin["intercept"].numpy(), lin["alpha"]),
        )
    else:
        model = build_model(config, layout, direct_horizon=blob["direct_horizon"])
        model.load_state_dict(blob["state_dict"])
        model.eval()
    return Checkpoint(
        model, blob["method"], NormStats.from_dict(blob["norm_stats"]),
        WindowSpec(**blob["window"]), blob.get("extra", {}),
    )
