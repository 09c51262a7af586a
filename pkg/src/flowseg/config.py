"""Configuration dataclasses and JSON (de)serialization with strict key checking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    mask_channels: int = 1
    cond_channels: int = 1
    size: int = 32
    width: int = 16
    depth: int = 2
    temb_dim: int = 32

    def validate(self) -> "NetworkConfig":
        if self.mask_channels < 1 or self.cond_channels < 0:
            raise ConfigError(f"bad channel counts: {self}")
        if self.width < 1 or self.depth < 1:
            raise ConfigError(f"width and depth must be >= 1: {self}")
        if self.temb_dim < 2 or self.temb_dim % 2:
            raise ConfigError(f"temb_dim must be an even integer >= 2, got {self.temb_dim}")
        if self.size < 1 or self.size % (2**self.depth):
            raise ConfigError(f"size {self.size} not divisible by 2**depth = {2 ** self.depth}")
        return self


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-4
    batch_size: int = 64
    iterations: int = 1000
    p_drop: float = 0.1
    seed: int = 0
    eps_t: float = 1e-3
    ma_window: int = 100

    def validate(self) -> "TrainingConfig":
        if not 0.0 <= self.p_drop <= 1.0:
            raise ConfigError(f"p_drop must be in [0, 1], got {self.p_drop}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError(f"batch_size >= 1 and iterations >= 0 required: {self}")
        if not 0.0 <= self.eps_t < 1.0:
            raise ConfigError(f"eps_t must be in [0, 1), got {self.eps_t}")
        return self


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "midpoint"
    step: float = 0.01
    guidance: float = 0.3
    threshold: float = 0.5

    @property
    def n_steps(self) -> int:
        return int(round(1.0 / self.step))

    def validate(self) -> "IntegratorConfig":
        if self.method not in ("midpoint", "euler"):
            raise ConfigError(f"unknown integrator {self.method!r}")
        if not 0.0 < self.step <= 1.0:
            raise ConfigError(f"step must be in (0, 1], got {self.step}")
        n = 1.0 / self.step
        if abs(n - round(n)) > 1e-9 * n:
            raise ConfigError(f"1/step must be an integer, got 1/{self.step} = {n}")
        return self


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 200
    size: int = 32
    annotators: int = 4
    p_empty: float = 0.5
    sigma_r: float = 1.0
    noise: float = 0.05
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if not 0.0 <= self.p_empty <= 1.0:
            raise ConfigError(f"p_empty must be in [0, 1], got {self.p_empty}")
        if self.sigma_r < 0 or self.noise < 0:
            raise ConfigError(f"sigma_r and noise must be >= 0: {self}")
        if self.n_samples < 0 or self.annotators < 1 or self.size < 4:
            raise ConfigError(f"need n_samples >= 0, annotators >= 1, size >= 4: {self}")
        return self


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> "RunConfig":
        self.network.validate()
        self.training.validate()
        self.integrator.validate()
        self.synth.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


_SECTIONS = {
    "network": NetworkConfig,
    "training": TrainingConfig,
    "integrator": IntegratorConfig,
    "synth": SynthConfig,
}


def section_from_dict(cls, d: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    kw = {}
    for k, v in d.items():
        typ = type(getattr(cls(), k))
        if typ is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, typ) or isinstance(v, bool):
            raise ConfigError(f"{cls.__name__}.{k}: expected {typ.__name__}, got {v!r}")
        kw[k] = v
    return cls(**kw)


def run_config_from_dict(d: dict) -> RunConfig:
    unknown = sorted(set(d) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    return RunConfig(**{k: section_from_dict(cls, d.get(k, {})) for k, cls in _SECTIONS.items()})


def load_run_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return run_config_from_dict(d)
