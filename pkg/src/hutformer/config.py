"""Model, optimizer and run configuration, plus the key=value config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

DAYS_PER_WEEK = 7


@dataclass
class ModelConfig:
    history_len: int = 288
    horizon: int = 288
    segment_len: int = 12
    num_channels: int = 1
    num_sensors: int = 207
    steps_per_day: int = 288
    d_model: int = 32
    d_spatial: int = 32
    d_tid: int = 8
    d_diw: int = 32
    num_blocks: int = 4
    window_size: int = 3
    num_heads: int = 4
    mlp_ratio: float = 4.0
    activation: str = "gelu"
    d_dec: int = 32
    dec_heads: int = 4
    ln_eps: float = 1e-5
    # variant switches
    hierarchical: bool = True
    merge_projection: bool = False
    positional: str = "stpe"  # "stpe" | "learned"
    decoder: str = "cross_scale"  # "cross_scale" | "concat" | "none"
    scale_order: str = "coarse_to_fine"  # "coarse_to_fine" | "fine_to_coarse"
    residual_refine: bool = False

    @property
    def num_segments(self) -> int:
        return self.history_len // self.segment_len

    @property
    def num_dec_segments(self) -> int:
        return self.horizon // self.segment_len

    def scale_shapes(self) -> list[tuple[int, int]]:
        """(tokens, width) of every encoder block output, finest first."""
        p, d = self.num_segments, self.d_model
        if not self.hierarchical:
            return [(p, d)] * self.num_blocks
        return [(p >> l, d << l) for l in range(self.num_blocks)]

    @property
    def head_in_dim(self) -> int:
        p, d = self.scale_shapes()[-1]
        return p * d

    def validate(self) -> "ModelConfig":
        if min(self.history_len, self.horizon, self.segment_len, self.num_channels,
               self.num_sensors, self.steps_per_day, self.num_blocks, self.window_size,
               self.num_heads, self.d_model, self.d_dec, self.dec_heads) < 1:
            raise ConfigError("all model sizes must be positive")
        if self.history_len % self.segment_len:
            raise ConfigError(
                f"history_len {self.history_len} not divisible by segment_len {self.segment_len}")
        if self.horizon % self.segment_len:
            raise ConfigError(f"horizon {self.horizon} not divisible by segment_len {self.segment_len}")
        if self.positional not in ("stpe", "learned"):
            raise ConfigError(f"unknown positional encoding {self.positional!r}")
        if self.decoder not in ("cross_scale", "concat", "none"):
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        if self.scale_order not in ("coarse_to_fine", "fine_to_coarse"):
            raise ConfigError(f"unknown scale_order {self.scale_order!r}")
        p = self.num_segments
        if self.hierarchical and p % (1 << (self.num_blocks - 1)):
            raise ConfigError(
                f"{p} segments cannot be halved {self.num_blocks - 1} times")
        window = self.window_size if self.hierarchical else p
        for tokens, width in self.scale_shapes():
            if tokens % window:
                raise ConfigError(f"scale with {tokens} tokens not divisible by window {window}")
            if width % self.num_heads:
                raise ConfigError(f"width {width} not divisible by {self.num_heads} heads")
        if self.d_dec % self.dec_heads:
            raise ConfigError(f"d_dec {self.d_dec} not divisible by {self.dec_heads} heads")
        return self


@dataclass
class OptimConfig:
    learning_rate: float = 0.0005
    weight_decay: float = 0.0001
    batch_size: int = 64
    milestones: list[int] = field(default_factory=lambda: [1, 40, 80, 120])
    gamma: float = 0.5
    grad_clip_norm: float = 5.0
    max_epochs: int = 150
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decoupled_weight_decay: bool = False
    training_mode: str = "two_stage"  # "two_stage" | "end2end" | "no_fix"
    train_stride: int = 1
    eval_stride: int = 1

    def validate(self) -> "OptimConfig":
        if self.learning_rate <= 0 or self.weight_decay < 0 or self.batch_size < 1:
            raise ConfigError("learning_rate and batch_size must be positive, weight_decay >= 0")
        if self.gamma <= 0 or self.grad_clip_norm <= 0 or self.max_epochs < 1:
            raise ConfigError("gamma, grad_clip_norm and max_epochs must be positive")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing: {self.milestones}")
        if self.training_mode not in ("two_stage", "end2end", "no_fix"):
            raise ConfigError(f"unknown training_mode {self.training_mode!r}")
        if self.train_stride < 1 or self.eval_stride < 1:
            raise ConfigError("sample strides must be >= 1")
        return self


@dataclass
class RunConfig:
    dataset: str = ""
    split_ratios: list[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])
    variant: str = "full"
    output_dir: str = "runs/default"
    mask_zeros: bool = False
    horizons: list[int] = field(default_factory=lambda: [12, 48, 96, 144, 192, 288])
    cumulative_horizons: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)


# ---------------------------------------------------------------- key=value files


def _leaf_fields(cfg: RunConfig):
    """Yield (owner, field) for every scalar/list setting, in file order."""
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in fields(value):
                yield value, sub
        else:
            yield cfg, f


def _field_type(owner, f) -> type:
    default = getattr(type(owner)(), f.name)
    return type(default)


def _parse(text: str, kind: type, default: Any):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if kind is list:
        elem = type(default[0]) if default else str
        return [_parse(t, elem, None) for t in text.split(",") if t.strip()]
    try:
        return kind(text)
    except ValueError as e:
        raise ConfigError(f"cannot parse {text!r} as {kind.__name__}") from e


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def setting_names(cfg: RunConfig | None = None) -> list[str]:
    return [f.name for _, f in _leaf_fields(cfg or RunConfig())]


def set_value(cfg: RunConfig, key: str, text: str):
    for owner, f in _leaf_fields(cfg):
        if f.name == key:
            setattr(owner, key, _parse(text, _field_type(owner, f), getattr(type(owner)(), key)))
            return
    raise ConfigError(f"unknown config key {key!r}")


def dumps(cfg: RunConfig) -> str:
    lines = []
    for owner, f in _leaf_fields(cfg):
        lines.append(f"{f.name} = {_format(getattr(owner, f.name))}")
    return "\n".join(lines) + "\n"


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        set_value(cfg, key.strip(), value)
    return cfg


def load_file(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return loads(Path(path).read_text(encoding="utf-8"), base)


def save_file(cfg: RunConfig, path: str | Path):
    Path(path).write_text(dumps(cfg), encoding="utf-8")


def model_config_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in d.items() if k in known})
