"""Run configuration: plain-text key = value files with command-line overrides.

Unknown keys are rejected. File values override defaults; flags override both.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

from .dapo import TrainConfig
from .errors import ConfigError


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


@dataclass
class RunConfig:
    # optimization
    epochs: int = 150
    cases_per_epoch: int = 16
    rollouts_per_case: int = 4
    steps_per_rollout: int = 3
    learning_rate: float = 0.05
    clip_low: float = 0.2
    clip_high: float = 0.28
    lambda_logic: float = 0.5
    lambda_align: float = 0.5
    w_acc: float = 0.55
    w_logic: float = 0.35
    w_ground: float = 0.1
    tau: float = 0.07
    temperature: float = 1.0
    seed: int = 0
    advantage_norm: bool = True
    group_filter: bool = True
    zero_vision: bool = False
    # model
    hidden_dim: int = 32
    n_heads: int = 4
    # world
    n_atoms: int = 12
    n_rules: int = 8
    n_classes: int = 4
    visual_dim: int = 16
    noise_sigma: float = 0.1
    world_seed: int = -1  # -1 means "use seed"
    # dataset synthesis
    n_cases: int = 200
    case_seed: int = -1  # -1 means "use seed"
    # paths
    synonyms: str = ""

    def resolved_world_seed(self) -> int:
        return self.seed if self.world_seed < 0 else self.world_seed

    def resolved_case_seed(self) -> int:
        return self.seed if self.case_seed < 0 else self.case_seed

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            cases_per_epoch=self.cases_per_epoch,
            rollouts_per_case=self.rollouts_per_case,
            steps_per_rollout=self.steps_per_rollout,
            learning_rate=self.learning_rate,
            clip_low=self.clip_low,
            clip_high=self.clip_high,
            lambda_logic=self.lambda_logic,
            lambda_align=self.lambda_align,
            w_acc=self.w_acc,
            w_logic=self.w_logic,
            w_ground=self.w_ground,
            tau=self.tau,
            rng_seed=self.seed,
            temperature=self.temperature,
            hidden_dim=self.hidden_dim,
            n_heads=self.n_heads,
            advantage_norm=self.advantage_norm,
            group_filter=self.group_filter,
            zero_vision=self.zero_vision,
        )

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            return _parse_bool(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def parse_config_file(path) -> dict:
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value.strip())
    return values


def load_run_config(config_path=None, overrides: Mapping | None = None) -> RunConfig:
    """Defaults, then the config file, then non-None overrides."""
    values: dict = {}
    if config_path is not None:
        values.update(parse_config_file(config_path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown configuration key {key!r}")
        values[key] = value
    config = RunConfig(**values)
    config.train_config().validate()
    if config.n_cases < 1:
        raise ConfigError("n_cases must be >= 1")
    if config.synonyms and not Path(config.synonyms).is_file():
        raise ConfigError(f"synonym table not found: {config.synonyms}")
    return config
