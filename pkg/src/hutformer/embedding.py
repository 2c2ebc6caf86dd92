"""Segment embedding and spatial-temporal positional encoding."""

from __future__ import annotations

import numpy as np

from . import numerics as F
from .config import DAYS_PER_WEEK, ModelConfig
from .errors import ConfigError
from .nn import Linear, Module, Parameter, trunc_normal
from .numerics import Tensor


def segment(x: Tensor, segment_len: int) -> Tensor:
    """[..., T, C] -> [..., T/L, L*C]; segment j is the flattened slice [jL, (j+1)L)."""
    *lead, t, c = x.shape
    if t % segment_len:
        raise ConfigError(f"sequence length {t} not divisible by segment length {segment_len}")
    return F.reshape(x, (*lead, t // segment_len, segment_len * c))


def unsegment(x: Tensor, num_channels: int) -> Tensor:
    """[..., P, L*C] -> [..., P*L, C]."""
    *lead, p, lc = x.shape
    return F.reshape(x, (*lead, p * (lc // num_channels), num_channels))


def segment_starts(per_step: np.ndarray, segment_len: int) -> np.ndarray:
    """Index of each segment's first step, e.g. the time-of-day slot a token is tagged with."""
    return np.asarray(per_step)[..., ::segment_len]


class SegmentEmbedding(Module):
    def __init__(self, segment_len: int, num_channels: int, dim: int, rng: np.random.Generator):
        self.segment_len = segment_len
        self.proj = Linear(segment_len * num_channels, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(segment(x, self.segment_len))


class STPositionalEncoding(Module):
    """Concatenate sensor, time-of-day and day-of-week rows to each token, then fuse back to ``dim``.

    ``spatial`` may be passed in to share another module's sensor table; it is
    then not registered as a parameter of this module.
    """

    def __init__(self, dim: int, num_sensors: int, steps_per_day: int, d_spatial: int,
                 d_tid: int, d_diw: int, rng: np.random.Generator, own_spatial: bool = True):
        if own_spatial:
            self.spatial = Parameter(trunc_normal(rng, (num_sensors, d_spatial)))
        self.tid = Parameter(trunc_normal(rng, (steps_per_day, d_tid)))
        self.diw = Parameter(trunc_normal(rng, (DAYS_PER_WEEK, d_diw)))
        self.fuse = Linear(dim + d_spatial + d_tid + d_diw, dim, rng)

    def __call__(self, tokens: Tensor, sensor, tid, diw, spatial: Tensor | None = None) -> Tensor:
        table = spatial if spatial is not None else self.spatial
        *lead, p, _ = tokens.shape
        sensor = np.asarray(sensor, dtype=np.int64)
        tid = np.asarray(tid, dtype=np.int64)
        diw = np.asarray(diw, dtype=np.int64)
        if tid.shape[-1] != p or diw.shape[-1] != p:
            raise ConfigError(f"need one temporal index per segment ({p}), got {tid.shape} / {diw.shape}")
        e = F.embedding(table, sensor[..., None])  # [..., 1, d1]
        e = F.broadcast_to(e, (*lead, p, table.shape[1]))
        parts = [tokens, e, F.embedding(self.tid, tid), F.embedding(self.diw, diw)]
        return self.fuse(F.concat(parts, axis=-1))


class LearnedPositional(Module):
    """Plain learnable per-position table added to the tokens (the ``no_stpe`` ablation)."""

    def __init__(self, num_positions: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(trunc_normal(rng, (num_positions, dim)))

    def __call__(self, tokens: Tensor, *unused, **unused_kw) -> Tensor:
        return tokens + self.table


class InputEmbedding(Module):
    """History window -> embedded tokens U [..., P, d]."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.segment_len = cfg.segment_len
        self.segment = SegmentEmbedding(cfg.segment_len, cfg.num_channels, cfg.d_model, rng)
        if cfg.positional == "stpe":
            self.position = STPositionalEncoding(
                cfg.d_model, cfg.num_sensors, cfg.steps_per_day, cfg.d_spatial,
                cfg.d_tid, cfg.d_diw, rng)
        else:
            self.position = LearnedPositional(cfg.num_segments, cfg.d_model, rng)

    @property
    def spatial(self) -> Tensor | None:
        return getattr(self.position, "spatial", None)

    def __call__(self, history: Tensor, sensor, tid_steps, diw_steps) -> Tensor:
        tokens = self.segment(history)
        return self.position(tokens, sensor,
                             segment_starts(tid_steps, self.segment_len),
                             segment_starts(diw_steps, self.segment_len))
