"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .network import NetworkConfig


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 10
    crop: int = 256
    pretrain_iters: int = 70_000
    epochs: int = 500
    w_attention: float = 1.0
    w_fg: float = 1.0
    w_bg: float = 1.0
    w_primary: float = 1.0
    fg_batch_fraction: float = 0.5
    seed: int = 0
    # 0 means epochs * steps_per_epoch
    max_steps: int = 0
    checkpoint_every: int = 1000
    val_images: int = 4
    freeze_attention: bool = False
    # "pixels": masked losses averaged over all pixels; "mask": over masked pixels
    fg_normalization: str = "pixels"

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "crop", "epochs", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("pretrain_iters", "max_steps", "val_images"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("w_attention", "w_fg", "w_bg", "w_primary"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.fg_batch_fraction <= 1.0:
            raise ValueError("fg_batch_fraction must lie in [0, 1]")
        if self.fg_normalization not in ("pixels", "mask"):
            raise ValueError("fg_normalization must be 'pixels' or 'mask'")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_attention, self.w_fg, self.w_bg, self.w_primary)


def _convert(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def _defaults(cls) -> dict:
    return {f.name: getattr(cls(), f.name) for f in dataclasses.fields(cls)}


def parse_config(text: str, source: str = "<config>") -> tuple[TrainConfig, NetworkConfig]:
    """Parse ``key = value`` lines into training and network configs.

    Keys are the field names of :class:`TrainConfig` and
    :class:`NetworkConfig`; anything else is an error. ``#`` starts a
    comment. Tuple values are comma-separated.
    """
    train_defaults = _defaults(TrainConfig)
    net_defaults = _defaults(NetworkConfig)
    train_kw: dict = {}
    net_kw: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in train_defaults:
            train_kw[key] = _convert(value, train_defaults[key], key)
        elif key in net_defaults:
            net_kw[key] = _convert(value, net_defaults[key], key)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
    try:
        return TrainConfig(**train_kw), NetworkConfig(**net_kw)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path: str | Path) -> tuple[TrainConfig, NetworkConfig]:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def format_config(train: TrainConfig, net: NetworkConfig | None = None) -> str:
    lines = []
    for cfg in (train, net):
        if cfg is None:
            continue
        for f in dataclasses.fields(cfg):
            value = getattr(cfg, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
