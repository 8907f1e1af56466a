"""The full normal estimation network: encoder -> tokens -> block chain -> head."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import TrainConfig
from .feature_encoder import FeatureEncoder
from .normal_head import NormalHead
from .pssm import BlockChain, Tokenizer


@dataclass
class NetOutput:
    normal: torch.Tensor      # B x 3, unit, aligned frame
    weights: torch.Tensor     # B x M
    surface: torch.Tensor     # B x M x E
    degenerate: torch.Tensor  # B bool


class NormalNet(nn.Module):
    def __init__(self, config: TrainConfig | None = None, zero_init_chain=False):
        super().__init__()
        cfg = config or TrainConfig()
        self.config = cfg
        self.encoder = FeatureEncoder(cfg.patch_size, cfg.c_g, cfg.c_c, cfg.knn_k, cfg.effective_fusion,
                                      growth=cfg.dense_growth, n_blocks=cfg.dense_blocks,
                                      n_layers=cfg.dense_layers)
        self.tokenizer = Tokenizer(cfg.c_g, cfg.c_c, cfg.encoding_dim)
        self.chain = BlockChain(cfg.encoding_dim, cfg.depth, cfg.mamba_enabled, cfg.state_dim,
                                cfg.conv_width, cfg.expand, zero_init_output=zero_init_chain)
        self.head = NormalHead(cfg.encoding_dim, cfg.weight_floor)

    def tokens(self, coords):
        feats = self.encoder(coords)
        return self.tokenizer(feats.fused_G, feats.local_C)

    def forward(self, coords) -> NetOutput:
        surface = self.chain(self.tokens(coords))
        w = self.head.point_weights(surface)
        n, degenerate = self.head.predict_normal(surface, w)
        return NetOutput(n, w, surface, degenerate)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
