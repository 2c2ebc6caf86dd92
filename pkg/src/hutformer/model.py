"""Full model assembly and the ablation variants."""

from __future__ import annotations

import dataclasses

import numpy as np

from .config import ModelConfig, OptimConfig
from .dataset import Batch
from .decoder import ConcatHead, HierarchicalDecoder
from .embedding import InputEmbedding
from .encoder import HierarchicalEncoder, ScalePyramid
from .errors import ConfigError
from .nn import Module, Parameter
from .numerics import Tensor

VARIANTS = ("full", "concat", "no_decoder", "no_hierarchy", "no_stpe", "no_se", "end2end", "no_fix")


def variant(name: str, model: ModelConfig | None = None,
            optim: OptimConfig | None = None) -> tuple[ModelConfig, OptimConfig]:
    """Apply an ablation preset on top of the given (or default) configs."""
    model = dataclasses.replace(model or ModelConfig())
    optim = dataclasses.replace(optim or OptimConfig())
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    if name == "concat":
        model.decoder = "concat"
    elif name == "no_decoder":
        model.decoder = "none"
    elif name == "no_hierarchy":
        model.hierarchical = False
    elif name == "no_stpe":
        model.positional = "learned"
    elif name == "no_se":
        model.segment_len = 1
    elif name == "end2end":
        optim.training_mode = "end2end"
    elif name == "no_fix":
        optim.training_mode = "no_fix"
    return model.validate(), optim.validate()


class HUTFormer(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.embedding = InputEmbedding(cfg, rng)
        self.encoder = HierarchicalEncoder(cfg, rng)
        if cfg.decoder == "cross_scale":
            self.decoder = HierarchicalDecoder(cfg, rng)
        elif cfg.decoder == "concat":
            self.decoder = ConcatHead(cfg, rng)
        else:
            self.decoder = None

    @property
    def has_decoder(self) -> bool:
        return self.decoder is not None

    def encoder_parameters(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("decoder.")]

    def decoder_parameters(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith("decoder.")]

    def encode(self, batch: Batch) -> ScalePyramid:
        u = self.embedding(Tensor(batch.history), batch.sensor, batch.tid_hist, batch.diw_hist)
        return self.encoder(u)

    def decode(self, pyramid: ScalePyramid, batch: Batch) -> Tensor:
        if self.decoder is None:
            return pyramid.intermediate
        return self.decoder(pyramid, batch.sensor, batch.tid_fut, batch.diw_fut, self.embedding.spatial)

    def __call__(self, batch: Batch) -> tuple[ScalePyramid, Tensor]:
        pyramid = self.encode(batch)
        return pyramid, self.decode(pyramid, batch)

    def attention_weights(self) -> list[np.ndarray]:
        out = self.encoder.attention_weights()
        if isinstance(self.decoder, HierarchicalDecoder):
            out += self.decoder.attention_weights()
        return [w for w in out if w is not None]
