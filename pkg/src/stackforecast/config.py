"""Run configuration: flat ``key = value`` text with defaults taken from the published settings."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .acb import AcbArchitecture
from .gbt import GbtConfig
from .tft import TftArchitecture
from .trainer import TrainConfig

# keys that only say where things live, not what is computed
NON_HASHED = ("out_dir", "workers", "data_path")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    data_path: str = "data/btc_usd_daily.csv"
    out_dir: str = "runs/default"
    seed: int = 0
    train_ratio: float = 0.8
    val_ratio: float = 0.1
    test_ratio: float = 0.1
    lookback: int = 60

    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 10

    acb_hidden1: int = 64
    acb_hidden2: int = 32
    acb_dense_units: int = 64
    acb_dropout: float = 0.2
    acb_attention_prior: float = 0.5
    acb_summary: str = "last"
    acb_clip_norm: float | None = None

    tft_d_model: int = 32
    tft_dropout: float = 0.1
    tft_clip_norm: float | None = 0.1

    gbt_n_estimators: int = 1000
    gbt_learning_rate: float = 0.05
    gbt_max_depth: int = 4
    gbt_subsample: float = 0.7
    gbt_colsample_bytree: float = 0.7
    gbt_alpha: float = 1.0
    gbt_lambda: float = 5.0
    gbt_gamma: float = 1.0
    gbt_min_child_weight: float = 10.0
    gbt_early_stopping_rounds: int = 50
    gbt_verbosity: int = 1
    meta_residual: bool = True
    meta_holdout_fraction: float = 0.0

    outlier_feature: str = "close"
    outlier_threshold: float = 3.0
    outlier_ddof: int = 0
    ci_z: float = 1.96
    ci_ddof: int = 1
    volatility_window: int = 30
    stability_seeds: tuple[int, ...] = tuple(range(10))
    workers: int = 1

    def __post_init__(self):
        if abs(self.train_ratio + self.val_ratio + self.test_ratio - 1.0) > 1e-9:
            raise ConfigError("split ratios must sum to 1")
        if self.lookback < 1:
            raise ConfigError("lookback must be >= 1")
        if not 0 <= self.meta_holdout_fraction < 1:
            raise ConfigError("meta_holdout_fraction must lie in [0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.train_ratio, self.val_ratio, self.test_ratio)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- derived component configs -------------------------------------------
    def acb_architecture(self) -> AcbArchitecture:
        return AcbArchitecture(lookback=self.lookback, hidden1=self.acb_hidden1, hidden2=self.acb_hidden2,
                               dense_units=self.acb_dense_units, dropout=self.acb_dropout,
                               attention_prior=self.acb_attention_prior, summary=self.acb_summary)

    def tft_architecture(self) -> TftArchitecture:
        return TftArchitecture(encoder_length=self.lookback, d_model=self.tft_d_model, dropout=self.tft_dropout)

    def train_config(self, model: str, seed: int) -> TrainConfig:
        clip = self.acb_clip_norm if model == "acb" else self.tft_clip_norm
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, patience=self.patience, clip_norm=clip, seed=seed)

    def gbt_config(self, seed: int) -> GbtConfig:
        return GbtConfig(n_estimators=self.gbt_n_estimators, learning_rate=self.gbt_learning_rate,
                         max_depth=self.gbt_max_depth, subsample=self.gbt_subsample,
                         colsample_bytree=self.gbt_colsample_bytree, reg_alpha=self.gbt_alpha,
                         reg_lambda=self.gbt_lambda, gamma=self.gbt_gamma,
                         min_child_weight=self.gbt_min_child_weight,
                         early_stopping_rounds=self.gbt_early_stopping_rounds, seed=seed,
                         verbosity=self.gbt_verbosity)

    # -- text form -------------------------------------------------------------
    def to_text(self, include_all: bool = True) -> str:
        lines = []
        for f in fields(self):
            if not include_all and f.name in NON_HASHED:
                continue
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text(include_all=False).encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        defaults = cls()
        known = {f.name for f in fields(cls)}
        values = {}
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {n}: unknown key '{key}'")
            try:
                values[key] = _parse(value, getattr(defaults, key), key)
            except ValueError as exc:
                raise ConfigError(f"line {n}: {key}: {exc}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())


OPTIONAL_FLOATS = ("acb_clip_norm", "tft_clip_norm")


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text: str, default, key: str):
    if key in OPTIONAL_FLOATS:
        return None if text.lower() in ("none", "") else float(text)
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    return text
