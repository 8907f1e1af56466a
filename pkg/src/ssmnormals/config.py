"""Training / model configuration and its flat key-value file format."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

log = logging.getLogger(__name__)

FUSION_MODES = ("attention", "max", "eq18max")
SUPPORTED_DEPTHS = (6, 7, 8)


@dataclass
class TrainConfig:
    patch_size: int = 700
    epochs: int = 900
    batch_size: int = 100
    lr: float = 5e-4
    lr_milestones: list[int] = field(default_factory=lambda: [200, 400, 600, 800])
    lr_factor: float = 0.2
    depth: int = 7
    attention_enabled: bool = True
    mamba_enabled: bool = True
    use_wt_loss: bool = True
    use_cnd: bool = False
    fusion_mode: str = "attention"
    seed: int = 0
    patches_per_shape: int = 1000
    augment_rotation: bool = True
    checkpoint_every: int = 10
    # loss
    gamma_sin: float = 0.1
    gamma_wt: float = 1.0
    weight_floor: float = 0.01
    # architecture
    c_g: int = 128
    c_c: int = 64
    knn_k: int = 16
    encoding_dim: int = 128
    dense_growth: int = 32
    dense_blocks: int = 2
    dense_layers: int = 2
    state_dim: int = 16
    conv_width: int = 4
    expand: int = 2

    def __post_init__(self):
        self.validate()

    @property
    def token_count(self) -> int:
        return self.patch_size // 4

    @property
    def effective_fusion(self) -> str:
        if not self.attention_enabled and self.fusion_mode == "attention":
            return "max"
        return self.fusion_mode

    def validate(self):
        if self.patch_size < 8 or self.patch_size % 4:
            raise ConfigError(f"patch_size must be a multiple of 4 and >= 8, got {self.patch_size}")
        if self.epochs < 1 or self.batch_size < 1 or self.patches_per_shape < 1:
            raise ConfigError("epochs, batch_size and patches_per_shape must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.lr_factor < 1:
            raise ConfigError("lr_factor must lie in (0, 1)")
        ms = list(self.lr_milestones)
        if any(m <= 0 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError(f"lr_milestones must be positive and strictly increasing, got {ms}")
        if self.depth not in SUPPORTED_DEPTHS:
            raise ConfigError(f"depth must be one of {SUPPORTED_DEPTHS}, got {self.depth}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.knn_k >= self.token_count:
            raise ConfigError("knn_k must be smaller than patch_size / 4")
        if self.encoding_dim < 2 or self.c_g < 1 or self.c_c < 1:
            raise ConfigError("feature widths must be positive")

    def active_milestones(self) -> list[int]:
        return [m for m in self.lr_milestones if m < self.epochs]

    def lr_at_epoch(self, epoch: int) -> float:
        """Step schedule: ``lr * factor**k`` with k milestones reached (epochs are 0-based)."""
        k = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr * self.lr_factor ** k

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: dict[str, Any], base: "TrainConfig | None" = None) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        merged = (base or cls()).to_dict()
        for key, value in values.items():
            merged[key] = coerce(key, value, merged[key])
        return cls(**merged)

    @classmethod
    def from_file(cls, path: str | Path, base: "TrainConfig | None" = None) -> "TrainConfig":
        path = Path(path)
        try:
            values = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        nested = [k for k, v in values.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{path}: config must be flat, found table(s) {nested}")
        return cls.from_mapping(values, base)

    def with_overrides(self, overrides: Iterable[str]) -> "TrainConfig":
        values = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            values[key.strip()] = raw.strip()
        return self.from_mapping(values, self)

    def dumps(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, bool):
                lines.append(f"{key} = {'true' if value else 'false'}")
            elif isinstance(value, str):
                lines.append(f'{key} = "{value}"')
            elif isinstance(value, list):
                lines.append(f"{key} = [{', '.join(str(v) for v in value)}]")
            else:
                lines.append(f"{key} = {value!r}")
        return "\n".join(lines) + "\n"


def coerce(key: str, value: Any, default: Any) -> Any:
    """Convert ``value`` to the type of ``default``; strings come from the command line."""
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "on"):
                return True
            if isinstance(value, str) and value.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = [v for v in value.strip("[]").replace(" ", "").split(",") if v]
            return [int(v) for v in value]
        if isinstance(default, str):
            if not isinstance(value, str):
                raise ValueError(value)
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {value!r} for {key} (expected {type(default).__name__})") from None
    return value


def preset_path(name: str) -> Path:
    path = Path(__file__).parent / "configs" / (name if name.endswith(".cfg") else f"{name}.cfg")
    if not path.is_file():
        raise ConfigError(f"no preset named {name!r}")
    return path


def list_presets() -> list[str]:
    return sorted(p.stem for p in (Path(__file__).parent / "configs").glob("*.cfg"))
