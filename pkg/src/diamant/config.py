"""``key = value`` configuration files and the training configuration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .exceptions import ConfigError
from .segnet import VARIANTS, SkipSwitches


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return parse_config_text(text, str(path))


def _convert(value, target, key):
    if target is bool:
        if isinstance(value, bool):
            return value
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        return target(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: cannot convert {value!r} to {target.__name__}") from e


def build_dataclass(cls, values: dict, types: dict | None = None):
    """Instantiate dataclass ``cls`` from string-ish ``values``; unknown keys
    are rejected with the list of valid ones."""
    valid = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(valid))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(sorted(valid))}")
    types = types or {}
    kwargs = {}
    for k, v in values.items():
        target = types.get(k)
        if target is None:
            default = valid[k].default
            target = type(default) if default is not None else str
        kwargs[k] = v if target is SkipSwitches else _convert(v, target, k)
    return cls(**kwargs)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 300
    lr_power: float = 0.9
    early_stop_patience: int = 30
    seed: int = 0
    eval_every: int = 1
    variant: str = "dual"
    switches: str = "1111"
    image_size: int = 64
    base_width: int = 8
    heads: int = 0  # 0: take from the manifest
    augment: bool = True

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch norm needs batch statistics)")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be at least 1")
        if self.max_epochs < 1 or self.eval_every < 1:
            raise ConfigError("max_epochs and eval_every must be at least 1")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.image_size % 16:
            raise ConfigError("image_size must be divisible by 16")
        self.switches = str(SkipSwitches.parse(self.switches))

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        return build_dataclass(cls, values)

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)
