"""Hierarchical decoder: segment queries cross-attend to the encoder pyramid coarse-to-fine."""

from __future__ import annotations

import numpy as np

from . import numerics as F
from .config import ModelConfig
from .embedding import LearnedPositional, STPositionalEncoding, SegmentEmbedding, segment_starts, unsegment
from .encoder import ScalePyramid, attention, masked_mae, merge_heads, split_heads
from .errors import ConfigError
from .nn import MLP, LayerNorm, Linear, Module
from .numerics import Tensor


class QueryBuilder(Module):
    """Segment-embed the intermediate prediction, then positional-encode with future indices."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.segment_len = cfg.segment_len
        self.segment = SegmentEmbedding(cfg.segment_len, cfg.num_channels, cfg.d_dec, rng)
        if cfg.positional == "stpe":
            self.position = STPositionalEncoding(
                cfg.d_dec, cfg.num_sensors, cfg.steps_per_day, cfg.d_spatial,
                cfg.d_tid, cfg.d_diw, rng, own_spatial=False)
        else:
            self.position = LearnedPositional(cfg.num_dec_segments, cfg.d_dec, rng)

    def __call__(self, intermediate: Tensor, sensor, tid_fut, diw_fut, spatial: Tensor | None) -> Tensor:
        tokens = self.segment(intermediate)
        return self.position(tokens, sensor,
                             segment_starts(tid_fut, self.segment_len),
                             segment_starts(diw_fut, self.segment_len),
                             spatial=spatial)


class CrossScaleAttention(Module):
    """Decoder tokens query one encoder scale projected to the decoder width."""

    def __init__(self, d_enc: int, d_dec: int, heads: int, rng: np.random.Generator):
        if d_dec % heads:
            raise ConfigError(f"d_dec {d_dec} not divisible by {heads} heads")
        self.heads = heads
        self.enc_proj = Linear(d_enc, d_dec, rng)
        self.q = Linear(d_dec, d_dec, rng)
        self.k = Linear(d_dec, d_dec, rng)
        self.v = Linear(d_dec, d_dec, rng)
        self.out = Linear(d_dec, d_dec, rng)
        self.last_weights: np.ndarray | None = None

    def __call__(self, h_enc: Tensor, h_dec: Tensor) -> Tensor:
        kv = self.enc_proj(h_enc)
        q = split_heads(self.q(h_dec), self.heads)
        k = split_heads(self.k(kv), self.heads)
        v = split_heads(self.v(kv), self.heads)
        ctx, weights = attention(q, k, v)  # weights [..., heads, P_dec, P_enc]
        self.last_weights = weights.data
        return self.out(merge_heads(ctx))


class CrossScaleTransformerLayer(Module):
    """H' = H_dec + MCA(LN(H_enc), LN(H_dec)); H'' = H' + MLP(LN(H'))."""

    def __init__(self, d_enc: int, d_dec: int, heads: int, mlp_ratio: float,
                 rng: np.random.Generator, activation: str = "gelu", eps: float = 1e-5):
        self.norm_enc = LayerNorm(d_enc, eps)
        self.norm_dec = LayerNorm(d_dec, eps)
        self.attn = CrossScaleAttention(d_enc, d_dec, heads, rng)
        self.norm2 = LayerNorm(d_dec, eps)
        self.mlp = MLP(d_dec, mlp_ratio, rng, activation)

    def __call__(self, h_enc: Tensor, h_dec: Tensor) -> Tensor:
        h = h_dec + self.attn(self.norm_enc(h_enc), self.norm_dec(h_dec))
        return h + self.mlp(self.norm2(h))


class HierarchicalDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        widths = [d for _, d in cfg.scale_shapes()]
        self.order = self.scale_order(cfg)
        self.queries = QueryBuilder(cfg, rng)
        self.blocks = [
            CrossScaleTransformerLayer(widths[s], cfg.d_dec, cfg.dec_heads, cfg.mlp_ratio, rng,
                                       cfg.activation, cfg.ln_eps)
            for s in self.order
        ]
        self.head = Linear(cfg.d_dec, cfg.segment_len * cfg.num_channels, rng)

    @staticmethod
    def scale_order(cfg: ModelConfig) -> list[int]:
        order = list(range(cfg.num_blocks))
        return order[::-1] if cfg.scale_order == "coarse_to_fine" else order

    def __call__(self, pyramid: ScalePyramid, sensor, tid_fut, diw_fut,
                 spatial: Tensor | None = None) -> Tensor:
        if len(pyramid.scales) != len(self.blocks):
            raise ConfigError(
                f"decoder has {len(self.blocks)} blocks but the pyramid has {len(pyramid.scales)} scales")
        h = self.queries(pyramid.intermediate, sensor, tid_fut, diw_fut, spatial)
        for s, block in zip(self.order, self.blocks):
            h = block(pyramid.scales[s].tokens, h)
        out = unsegment(self.head(h), self.cfg.num_channels)
        if self.cfg.residual_refine:
            out = out + pyramid.intermediate
        return out

    def attention_weights(self) -> list[np.ndarray]:
        return [b.attn.last_weights for b in self.blocks]


class ConcatHead(Module):
    """Ablation decoder: nearest-upsample every scale to the finest length, concatenate, linear head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        shapes = cfg.scale_shapes()
        p0 = shapes[0][0]
        self.repeats = [p0 // p for p, _ in shapes]
        width = p0 * sum(d for _, d in shapes)
        self.head = Linear(width, cfg.horizon * cfg.num_channels, rng)

    def __call__(self, pyramid: ScalePyramid, *unused, **unused_kw) -> Tensor:
        parts = []
        for seq, r in zip(pyramid.scales, self.repeats):
            t = seq.tokens
            parts.append(F.repeat(t, r, axis=-2) if r > 1 else t)
        h = F.concat(parts, axis=-1)
        *lead, p, d = h.shape
        out = self.head(F.reshape(h, (*lead, p * d)))
        return F.reshape(out, (*lead, self.cfg.horizon, self.cfg.num_channels))


decoder_loss = masked_mae
