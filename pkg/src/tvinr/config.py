"""Hyperparameters and the YAML config file schema."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

IMPUTATION_TAUS = (0.05, 0.30, 0.50, 0.75, 0.90, 1.0)
FORECAST_HORIZONS = (96, 192, 336, 720)
ACTIVATIONS = ("relu", "lrelu_01", "gelu")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    task: str = "imputation"
    dim_z: int = 32
    d_model: int = 128
    heads: int = 2
    layers: int = 2
    hyper_layers: tuple[int, ...] = (128, 256)
    hyper_activation: str = "gelu"
    generator_layers: tuple[int, ...] = (64, 64, 64)
    generator_activation: str = "relu"
    fourier_m: int = 256
    fourier_sigma: float = 2.0
    covariate_layers: tuple[int, ...] = (8, 8)
    dim_c: int = 4
    n_channels: int = 1
    n_covariates: int = 0
    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 2000
    beta: float = 1.0
    dropout: float = 0.0
    causal: bool = False
    tau_set: tuple[float, ...] = IMPUTATION_TAUS
    horizons: tuple[int, ...] = FORECAST_HORIZONS
    history: int = 512
    imputation_encoder: str = "prior"
    precision: int = 64
    seed: int = 0
    # windowing of long input series
    window: int = 200
    stride: int = 50
    test_windows: int = 1

    def __post_init__(self):
        for name in ("hyper_layers", "generator_layers", "covariate_layers", "tau_set", "horizons"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.task not in ("imputation", "forecasting"):
            raise ConfigError(f"task must be 'imputation' or 'forecasting', got {self.task!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model ({self.d_model}) must be divisible by heads ({self.heads})")
        if not self.tau_set or any(not 0.0 <= t <= 1.0 for t in self.tau_set):
            raise ConfigError("tau_set must be a non-empty subset of [0, 1]")
        if not self.horizons or any(h < 1 for h in self.horizons) or self.history < 1:
            raise ConfigError("horizons and history must be positive")
        for name in ("hyper_activation", "generator_activation"):
            if getattr(self, name) not in ACTIVATIONS:
                raise ConfigError(f"{name} must be one of {ACTIVATIONS}")
        if min(self.generator_layers + self.hyper_layers, default=1) < 1:
            raise ConfigError("layer widths must be >= 1")
        if self.imputation_encoder not in ("prior", "posterior"):
            raise ConfigError("imputation_encoder must be 'prior' or 'posterior'")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.fourier_m < 1 or self.dim_z < 1 or self.n_channels < 1:
            raise ConfigError("fourier_m, dim_z and n_channels must be >= 1")

    @property
    def window_len(self) -> int:
        """Sample length the model trains on (history + longest horizon when forecasting)."""
        if self.task == "forecasting":
            return self.history + max(self.horizons)
        return self.window

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


REQUIRED_KEYS = (
    "task",
    "dim_z",
    "d_model",
    "heads",
    "layers",
    "hyper_layers",
    "generator_layers",
    "fourier_m",
    "fourier_sigma",
    "lr",
    "batch_size",
    "epochs",
)

PRESETS: dict[str, dict[str, Any]] = {
    # imputation, L=200 published hyperparameters
    "electricity-200": dict(window=200, stride=50, test_windows=50),
    "traffic-200": dict(window=200, stride=50, test_windows=20),
    "solar-200": dict(window=200, stride=50, test_windows=100),
    "electricity-2000": dict(
        dim_z=64, heads=4, batch_size=64, epochs=4000, generator_layers=(64, 64, 64, 64),
        window=2000, stride=500, test_windows=5,
    ),
    "har": dict(heads=4, layers=4, batch_size=128, epochs=3000, generator_layers=(64, 64, 64, 64),
                window=128, n_channels=3),
    "electricity-forecast": dict(task="forecasting", test_windows=7, stride=50),
    "traffic-forecast": dict(
        task="forecasting", dim_z=64, heads=4, batch_size=64, epochs=4000,
        generator_layers=(64, 64, 64, 64), test_windows=7, stride=50,
    ),
    # small model for gradient checks
    "gradcheck": dict(
        d_model=16, dim_z=4, heads=2, layers=2, hyper_layers=(32, 32), generator_layers=(16, 16),
        fourier_m=8, n_channels=2, window=32, precision=64,
    ),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


def config_from_dict(data: dict[str, Any], overrides: dict[str, Any] | None = None) -> TrainConfig:
    data = dict(data or {})
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    missing = [k for k in REQUIRED_KEYS if k not in data]
    if missing:
        raise ConfigError(f"missing config key: {missing[0]}")
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    try:
        return TrainConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> TrainConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping of config keys")
    return config_from_dict(data, overrides)


def dump_config(config: TrainConfig, path: str | Path | None = None) -> str:
    text = yaml.safe_dump(config.to_dict(), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text
