"""Experiment configuration: one JSON document drives a whole pipeline run.

Every section rejects unknown keys so a typo fails loudly instead of silently
falling back to a default. Relative paths resolve against the config file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .dataio import SyntheticSpec
from .errors import ConfigError, DataError
from .models import ModelConfig
from .training import TrainingConfig
from .windowing import WindowSpec

CONFIG_VERSION = 1


def _strict(cls, d: Mapping[str, Any] | None, section: str, drop: tuple[str, ...] = ()):
    d = dict(d or {})
    if not isinstance(d, dict):
        raise ConfigError(f"{section} must be an object")
    known = {f.name for f in dataclasses.fields(cls)} - set(drop)
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass(frozen=True)
class DataSource:
    """Exactly one of raw hourly ``files``, a daily ``dataset`` CSV or a ``synthetic`` spec."""

    files: tuple[Path, ...] = ()
    dataset: Path | None = None
    synthetic: SyntheticSpec | None = None

    def __post_init__(self):
        given = sum([bool(self.files), self.dataset is not None, self.synthetic is not None])
        if given != 1:
            raise ConfigError("data needs exactly one of 'files', 'dataset' or 'synthetic'")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base: Path) -> DataSource:
        unknown = set(d) - {"files", "dataset", "synthetic"}
        if unknown:
            raise ConfigError(f"unknown keys in data: {sorted(unknown)}")
        files = tuple(base / p for p in d.get("files", ()))
        dataset = base / d["dataset"] if d.get("dataset") is not None else None
        synth = SyntheticSpec.from_dict(d["synthetic"]) if d.get("synthetic") is not None else None
        return cls(files, dataset, synth)

    def check_paths(self) -> None:
        missing = [str(p) for p in (*self.files, *([self.dataset] if self.dataset else [])) if not p.exists()]
        if missing:
            raise DataError(f"data files not found: {missing}")

    def to_dict(self) -> dict[str, Any]:
        if self.files:
            return {"files": [str(p) for p in self.files]}
        if self.dataset is not None:
            return {"dataset": str(self.dataset)}
        return {"synthetic": dataclasses.asdict(self.synthetic)}


@dataclass(frozen=True)
class SplitOptions:
    train_end_year: int | None = None
    test_year: int | None = None
    n_pretest_days: int | None = None
    validation_fraction: float = 0.2

    def __post_init__(self):
        by_year = self.train_end_year is not None or self.test_year is not None
        if by_year == (self.n_pretest_days is not None):
            raise ConfigError("split needs either train_end_year/test_year or n_pretest_days")
        if by_year and (self.train_end_year is None or self.test_year is None):
            raise ConfigError("split by year needs both train_end_year and test_year")


@dataclass(frozen=True)
class EvalOptions:
    max_horizon: int | None = None
    fan_origin: str | None = None
    plot: bool = False
    batch_size: int = 512

    def __post_init__(self):
        if self.max_horizon is not None and self.max_horizon < 1:
            raise ConfigError("evaluation.max_horizon must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    data: DataSource
    split: SplitOptions
    window: WindowSpec
    model: ModelConfig
    training: TrainingConfig
    evaluation: EvalOptions = field(default_factory=EvalOptions)
    version: int = CONFIG_VERSION

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base: str | Path = ".", seed: int | None = None) -> ExperimentConfig:
        """Validate a parsed config document. ``seed`` overrides the document's seed."""
        base = Path(base)
        known = {"version", "name", "seed", "data", "split", "window", "model", "training", "evaluation"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        if d.get("version") != CONFIG_VERSION:
            raise ConfigError(f"config version must be {CONFIG_VERSION}, got {d.get('version')!r}")
        for key in ("name", "data", "split"):
            if key not in d:
                raise ConfigError(f"config is missing '{key}'")
        seed = d.get("seed") if seed is None else seed
        if seed is None:
            raise ConfigError("a seed is required: set 'seed' in the config or pass --seed")
        name = str(d["name"])
        if not name or "/" in name or name.startswith("."):
            raise ConfigError(f"bad experiment name {name!r}")
        model_d = dict(d.get("model") or {})
        if "seed" in model_d:
            raise ConfigError("set the seed at the top level, not in model")
        train_d = dict(d.get("training") or {})
        if "seed" in train_d:
            raise ConfigError("set the seed at the top level, not in training")
        return cls(
            name=name,
            seed=int(seed),
            data=DataSource.from_dict(d["data"], base),
            split=_strict(SplitOptions, d["split"], "split"),
            window=_strict(WindowSpec, d.get("window"), "window"),
            model=ModelConfig.from_dict({**model_d, "seed": int(seed)}),
            training=_strict(TrainingConfig, {**train_d, "seed": int(seed)}, "training"),
            evaluation=_strict(EvalOptions, d.get("evaluation"), "evaluation"),
        )

    @classmethod
    def load(cls, path: str | Path, seed: int | None = None) -> ExperimentConfig:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc, path.parent, seed)

    def with_overrides(self, *, method: str | None = None, architecture: str | None = None) -> ExperimentConfig:
        cfg = self
        if method is not None:
            cfg = dataclasses.replace(cfg, training=dataclasses.replace(cfg.training, method=method))
        if architecture is not None and architecture != cfg.model.architecture:
            # hyperparameters belong to the old architecture
            cfg = dataclasses.replace(
                cfg, model=dataclasses.replace(cfg.model, architecture=architecture, hyperparameters={})
            )
        return cfg

    def to_dict(self) -> dict[str, Any]:
        model = self.model.to_dict()
        model.pop("seed")
        training = dataclasses.asdict(self.training)
        training.pop("seed")
        return {
            "version": self.version,
            "name": self.name,
            "seed": self.seed,
            "data": self.data.to_dict(),
            "split": dataclasses.asdict(self.split),
            "window": dataclasses.asdict(self.window),
            "model": model,
            "training": training,
            "evaluation": dataclasses.asdict(self.evaluation),
        }
