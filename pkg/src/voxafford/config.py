"""Training configuration and its flat ``key=value`` file format.

Dotted keys in files map onto underscored field names, so ``fusion.mode=full``
sets ``fusion_mode``.  Comments start with ``#``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, ParseError
from .fusion import parse_mode
from .propagation import canonical_source

_ALIASES = {
    "fusion.mode": "fusion_mode",
    "propagation.prompt_source": "prompt_source",
    "propagation.injection_source": "injection_source",
    "propagation.injection": "injection",
    "propagation.aggregation": "aggregation",
    "loss.bce": "lambda_bce",
    "loss.dice": "lambda_dice",
    "loss.eps_dice": "eps_dice",
}


@dataclass
class TrainConfig:
    d: int = 64
    heads: int = 4
    decoder_layers: int = 2
    scales: tuple[int, ...] = (16, 32, 64)
    k_nn: int = 16
    d_pos: int = 24
    word_seed: int = 0
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9  # SGD momentum, or Adam's first-moment decay
    beta2: float = 0.999
    grad_clip: float = 0.0
    stage1_epochs: int = 10
    stage2_epochs: int = 20
    batch_size: int = 4
    seed: int = 0
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    eps_dice: float = 1.0
    fusion_mode: str = "full"
    prompt_source: str = "enhanced"
    injection_source: str = "original"
    injection: str = "on"
    aggregation: str = "attention"
    freeze_voxel_encoder: bool = True
    train_token_heads_stage2: bool = True
    n_points: int = 2048
    eval_every: int = 0

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        self.validate()

    def validate(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if list(self.scales) != sorted(self.scales) or len(set(self.scales)) != len(self.scales):
            raise ConfigError(f"scales must be strictly ascending, got {self.scales}")
        kind, res = parse_mode(self.fusion_mode)
        if kind == "single" and res not in self.scales:
            raise ConfigError(f"fusion mode {self.fusion_mode} names a scale outside {self.scales}")
        self.prompt_source = canonical_source(self.prompt_source)
        self.injection_source = canonical_source(self.injection_source)
        if self.injection not in ("on", "off"):
            raise ConfigError(f"propagation.injection must be on or off, got {self.injection!r}")
        if self.aggregation not in ("attention", "concat"):
            raise ConfigError(f"propagation.aggregation must be attention or concat, got {self.aggregation!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("lr must be positive and momentum, beta2 in [0, 1)")
        if self.batch_size < 1 or self.k_nn < 1 or self.decoder_layers < 0:
            raise ConfigError("batch_size and k_nn must be positive")
        for name in ("lambda_bce", "lambda_dice"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.eps_dice <= 0:
            raise ConfigError("eps_dice must be positive")

    @property
    def token_scales(self) -> tuple[int, ...]:
        """Scales that receive a token; a single-scale mode keeps only one."""
        kind, res = parse_mode(self.fusion_mode)
        return (res,) if kind == "single" else self.scales

    @property
    def K(self):
        return len(self.token_scales)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            name = normalize_key(key)
            if name not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(fields[name], raw, key)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str, path=None) -> "TrainConfig":
        return cls.from_dict(parse_kv(text, path))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        path = Path(path)
        return cls.from_text(path.read_text(), path)


def normalize_key(key: str) -> str:
    key = key.strip()
    return _ALIASES.get(key, key.replace(".", "_"))


def parse_kv(text: str, path=None) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key=value", path, lineno)
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _coerce(f: dataclasses.Field, raw, key):
    if not isinstance(raw, str):
        return raw
    default = f.default
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return raw
