"""Hierarchical encoder: window self-attention, segment merging and the intermediate head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as F
from .config import ModelConfig
from .errors import ConfigError, NumericError
from .nn import MLP, LayerNorm, Linear, Module
from .numerics import Tensor


@dataclass
class TokenSequence:
    tokens: Tensor  # [..., P, d]
    scale_index: int
    segment_span_steps: int


@dataclass
class ScalePyramid:
    scales: list[TokenSequence]  # finest first
    intermediate: Tensor  # [..., T_f, C]

    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(s.tokens.shape[-2:]) for s in self.scales]


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., n, d] -> [..., heads, n, d/heads]."""
    *lead, n, d = x.shape
    x = F.reshape(x, (*lead, n, heads, d // heads))
    k = len(lead)
    return F.permute(x, (*range(k), k + 1, k, k + 2))


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, n, dh] -> [..., n, heads*dh]."""
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = F.permute(x, (*range(k), k + 1, k, k + 2))
    return F.reshape(x, (*lead, n, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes; returns (output, weights)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = F.mul(F.matmul(q, F.transpose_last2(k)), scale)
    weights = F.softmax_last(scores)
    return F.matmul(weights, v), weights


class WindowAttention(Module):
    """Multi-head self-attention restricted to contiguous non-overlapping windows.

    ``window_size=None`` attends over the whole sequence.
    """

    def __init__(self, dim: int, heads: int, window_size: int | None, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.window_size = window_size
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        *lead, p, d = x.shape
        w = self.window_size or p
        if p % w:
            raise ConfigError(f"{p} tokens not divisible by window size {w}")
        # [..., P, d] -> [..., P/w, w, d]: windows become a batch axis
        xw = F.reshape(x, (*lead, p // w, w, d))
        q = split_heads(self.q(xw), self.heads)
        k = split_heads(self.k(xw), self.heads)
        v = split_heads(self.v(xw), self.heads)
        ctx, weights = attention(q, k, v)
        self.last_weights = weights.data
        return self.out(F.reshape(merge_heads(ctx), (*lead, p, d)))


class WindowTransformerLayer(Module):
    """Pre-norm block: H' = H + W-MSA(LN(H)); H'' = H' + MLP(LN(H'))."""

    def __init__(self, dim: int, heads: int, window_size: int | None, mlp_ratio: float,
                 rng: np.random.Generator, activation: str = "gelu", eps: float = 1e-5):
        self.norm1 = LayerNorm(dim, eps)
        self.attn = WindowAttention(dim, heads, window_size, rng)
        self.norm2 = LayerNorm(dim, eps)
        self.mlp = MLP(dim, mlp_ratio, rng, activation)

    def __call__(self, h: Tensor) -> Tensor:
        h = h + self.attn(self.norm1(h))
        return h + self.mlp(self.norm2(h))


def segment_merge(h: Tensor) -> Tensor:
    """Concatenate adjacent token pairs: [..., P, d] -> [..., P/2, 2d]."""
    *lead, p, d = h.shape
    if p % 2:
        raise ConfigError(f"segment merging needs an even token count, got {p}")
    # row-major reshape places H[2k] then H[2k+1] in output token k
    return F.reshape(h, (*lead, p // 2, 2 * d))


class HierarchicalEncoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.hierarchical = cfg.hierarchical
        shapes = cfg.scale_shapes()
        window = cfg.window_size if cfg.hierarchical else None
        self.blocks = [
            WindowTransformerLayer(d, cfg.num_heads, window, cfg.mlp_ratio, rng, cfg.activation, cfg.ln_eps)
            for _, d in shapes
        ]
        self.merges = (
            [Linear(d, d, rng, bias=False) for _, d in shapes[1:]]
            if cfg.hierarchical and cfg.merge_projection else []
        )
        self.head = Linear(cfg.head_in_dim, cfg.horizon * cfg.num_channels, rng)

    def __call__(self, u: Tensor) -> ScalePyramid:
        cfg = self.cfg
        h = u
        scales = []
        for l, block in enumerate(self.blocks):
            if l > 0 and self.hierarchical:
                h = segment_merge(h)
                if self.merges:
                    h = self.merges[l - 1](h)
            h = block(h)
            span = cfg.segment_len * (2 ** l if self.hierarchical else 1)
            scales.append(TokenSequence(h, l, span))
        *lead, p, d = h.shape
        flat = F.reshape(h, (*lead, p * d))
        pred = F.reshape(self.head(flat), (*lead, cfg.horizon, cfg.num_channels))
        return ScalePyramid(scales, pred)

    def attention_weights(self) -> list[np.ndarray]:
        return [b.attn.last_weights for b in self.blocks]


def masked_mae(pred: Tensor, truth: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean |pred - truth| over masked-in entries (the training loss of both stages)."""
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ConfigError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if mask is None:
        mask = np.ones(truth.shape, dtype=bool)
    if not np.any(mask):
        raise NumericError("loss over an empty mask")
    return F.masked_mean(F.absolute(F.sub(pred, truth)), mask)


encoder_loss = masked_mae
