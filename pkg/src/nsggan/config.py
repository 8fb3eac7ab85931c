"""Training configuration and its flat TOML file format.

A config file is a flat list of ``key = value`` lines in TOML grammar, one
key per :class:`TrainConfig` field. Unknown keys are rejected. Overrides use
the same ``key=value`` form on the command line.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .datapipe import DEFAULT_DROP_CLASSES, check_size
from .generator import ConfigError, GeneratorConfig
from .losses import LossWeights

STRATEGIES = ("self_only", "condition_only", "joint")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    max_steps: int = 0  # 0 = no cap
    learning_rate: float = 1e-4
    batch_size: int = 4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    strategy: str = "joint"
    checkpoint_interval: int = 0  # steps; 0 = final checkpoint only
    grad_clip: float = 0.0  # 0 = off
    log_wall_time: bool = False
    image_size: int = 64
    # desk-scale widths; the full-scale generator is 64 / 6 / 128 with a 64-wide critic
    base_channels: int = 8
    n_resblocks: int = 6
    injection_channels: int = 16
    disc_channels: int = 16
    drop_classes: tuple = DEFAULT_DROP_CLASSES
    projection_enabled: bool = True
    projection_condition: bool = True
    projection_noise_enabled: bool = True
    decoder_noise_enabled: bool = True
    constraint_enabled: bool = True
    constraint_mode: str = "disentangle_age"
    frm_enabled: bool = True
    critic_age_both_groups: bool = True
    critic_spectral_norm: bool = False
    critic_projection: bool = False
    critic_lr_ratio: float = 1.0  # critic lr = learning_rate * ratio
    lambda_adv: float = 1.0
    lambda_id: float = 10.0
    lambda_pix: float = 1.0
    lambda_cyc: float = 1.0
    lambda_self: float = 10.0
    lambda_age_reg: float = 800.0
    lambda_age_est: float = 10.0
    lambda_constraint: float = 1.0
    delta: float = 0.5
    age_est_cap: float = 1.0
    embedder_seed: int = 1234

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.max_steps < 0 or self.checkpoint_interval < 0:
            raise ConfigError("max_steps and checkpoint_interval must be >= 0")
        if self.critic_lr_ratio <= 0:
            raise ConfigError("critic_lr_ratio must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        try:
            check_size(self.image_size, self.image_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        object.__setattr__(self, "drop_classes", tuple(int(c) for c in self.drop_classes))
        self.generator_config()
        self.loss_weights()

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig.from_mapping(asdict(self))

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(adv=self.lambda_adv, id=self.lambda_id, pix=self.lambda_pix, cyc=self.lambda_cyc,
                               self=self.lambda_self, age_reg=self.lambda_age_reg,
                               age_est=self.lambda_age_est, constraint=self.lambda_constraint,
                               delta=self.delta, age_est_cap=self.age_est_cap)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["drop_classes"] = list(d["drop_classes"])
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        coerced = {k: _coerce(known[k], v) for k, v in values.items()}
        try:
            return cls(**coerced)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _coerce(f, value):
    default = f.default
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{f.name} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{f.name} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{f.name} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{f.name} expects a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{f.name} expects a string, got {value!r}")
    return value


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with a TOML literal value; bare words are taken as strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = (part.strip() for part in text.split("=", 1))
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key, value


def apply_overrides(config: TrainConfig, overrides: list[str] | dict) -> TrainConfig:
    items = overrides.items() if isinstance(overrides, dict) else map(parse_override, overrides)
    values = config.to_dict()
    for key, value in items:
        if key not in values:
            raise ConfigError(f"unknown config key in override: {key}")
        values[key] = value
    return TrainConfig.from_dict(values)


def load_config(path: str | Path | None, overrides: list[str] | dict = ()) -> TrainConfig:
    values = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                values = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        nested = [k for k, v in values.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"config must be flat; found tables {nested}")
    return apply_overrides(TrainConfig.from_dict(values), overrides)


def dumps_config(config: TrainConfig) -> str:
    return tomli_w.dumps(config.to_dict())


def save_config(config: TrainConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dumps_config(config))
    return path


@dataclass
class RunPaths:
    root: Path
    log: Path = field(init=False)
    resolved_config: Path = field(init=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.log = self.root / "log.jsonl"
        self.resolved_config = self.root / "resolved_config.toml"

    def checkpoint(self, step: int | None = None) -> Path:
        return self.root / ("last.safetensors" if step is None else f"ckpt_{step:06d}.safetensors")

