"""key=value run configuration with ``model.``, ``train.`` and ``data.`` sections."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .model import ModelConfig
from .synth import REGIMES, parse_mix
from .train import TrainConfig


class ConfigError(ValueError):
    """Unknown key, malformed line or a value of the wrong type."""


@dataclass(frozen=True)
class DataConfig:
    mix: str = "small:1.0"
    train_count: int = 256
    val_count: int = 32
    seed: int = 0
    height: int = 64
    width: int = 64

    def __post_init__(self):
        mix = parse_mix(self.mix)
        if not set(mix) <= set(REGIMES):
            raise ValueError(f"unknown regime in mix {self.mix!r}")
        if self.train_count < 0 or self.val_count < 0:
            raise ValueError("sample counts must be non-negative")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    SECTIONS = ("model", "train", "data")

    def items(self) -> list[tuple[str, object]]:
        out = []
        for section in self.SECTIONS:
            sub = getattr(self, section)
            for f in dataclasses.fields(sub):
                out.append((f"{section}.{f.name}", getattr(sub, f.name)))
        return out


def _coerce(raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def parse_lines(lines) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        out[key] = value
    return out


def read_config_file(path) -> dict[str, str]:
    with open(path) as fh:
        return parse_lines(fh)


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Return ``cfg`` with ``section.name`` keys replaced; unknown keys are rejected."""
    changes: dict[str, dict] = {s: {} for s in RunConfig.SECTIONS}
    for key, raw in overrides.items():
        section, _, name = key.partition(".")
        if section not in changes or not name:
            raise ConfigError(f"unknown config key {key!r}")
        sub = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(sub)}
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            changes[section][name] = _coerce(str(raw), getattr(sub, name))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    try:
        return RunConfig(**{s: dataclasses.replace(getattr(cfg, s), **changes[s]) for s in RunConfig.SECTIONS})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = apply_overrides(cfg, read_config_file(path))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in cfg.items())


def write_config(cfg: RunConfig, path) -> None:
    """Echo the effective configuration; reading it back reproduces ``cfg``."""
    with open(path, "w") as fh:
        fh.write(format_config(cfg))
