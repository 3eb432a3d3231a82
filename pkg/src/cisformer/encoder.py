"""Deformable-attention transformer encoder over pyramid levels 2..4."""
from __future__ import annotations

import torch
from torch import nn

from .backbone import FeaturePyramid
from .config import EncoderConfig
from .deformable import MultiScaleDeformableAttention
from .layers import FFN, pixel_centers, sine_encode_map

ENCODED_LEVELS = (2, 3, 4)


class ContractError(ValueError):
    pass


class EncoderLayer(nn.Module):
    """Pre-norm layer: deformable self-attention then FFN, both residual."""

    def __init__(self, cfg: EncoderConfig, num_levels: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.attn = MultiScaleDeformableAttention(cfg.embed_dim, cfg.num_heads, num_levels,
                                                  cfg.num_sampling_points)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.ffn = FFN(cfg.embed_dim, cfg.ffn_dim)

    def forward(self, x, pos, reference_points, spatial_shapes):
        y = self.norm1(x)
        x = x + self.attn(y + pos, reference_points, y, spatial_shapes)
        x = x + self.ffn(self.norm2(x))
        return x


def flatten_levels(maps: list[torch.Tensor]) -> tuple[torch.Tensor, list[tuple[int, int]]]:
    shapes = [tuple(m.shape[-2:]) for m in maps]
    tokens = torch.cat([m.flatten(2).transpose(1, 2) for m in maps], dim=1)
    return tokens, shapes


def split_levels(tokens: torch.Tensor, shapes: list[tuple[int, int]]) -> list[torch.Tensor]:
    out = []
    start = 0
    b, _, d = tokens.shape
    for h, w in shapes:
        out.append(tokens[:, start:start + h * w].transpose(1, 2).reshape(b, d, h, w))
        start += h * w
    return out


class DeformableEncoder(nn.Module):
    """Projects levels 2..4 to ``embed_dim``, encodes them jointly, re-splits."""

    def __init__(self, in_channels: tuple[int, ...], cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.input_proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, d, 1), nn.GroupNorm(min(32, d), d)) for c in in_channels
        )
        self.level_embed = nn.Parameter(torch.randn(len(in_channels), d) * 0.02)
        self.layers = nn.ModuleList(EncoderLayer(cfg, len(in_channels)) for _ in range(cfg.num_layers))

    def project(self, pyramid: FeaturePyramid) -> list[torch.Tensor]:
        return [proj(pyramid[lvl]) for proj, lvl in zip(self.input_proj, ENCODED_LEVELS)]

    def encode_tokens(self, maps: list[torch.Tensor]) -> list[torch.Tensor]:
        """Encode already-projected level maps ``[B, D, H_l, W_l]``; output shapes match input."""
        d = self.cfg.embed_dim
        for m in maps:
            if m.shape[1] != d:
                raise ContractError(f"encoder expects {d} channels per level, got {m.shape[1]}")
        tokens, shapes = flatten_levels(maps)
        b = tokens.shape[0]
        pos = torch.cat([
            sine_encode_map(h, w, d, tokens.dtype, tokens.device) + self.level_embed[i]
            for i, (h, w) in enumerate(shapes)
        ]).unsqueeze(0).expand(b, -1, -1)
        ref = torch.cat([pixel_centers(h, w, tokens.dtype, tokens.device) for h, w in shapes])
        ref = ref[None, :, None, :].expand(b, -1, len(shapes), -1)
        x = tokens
        for layer in self.layers:
            x = layer(x, pos, ref, shapes)
        return split_levels(x, shapes)

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        encoded = self.encode_tokens(self.project(pyramid))
        return FeaturePyramid(levels=dict(zip(ENCODED_LEVELS, encoded)), image_size=pyramid.image_size)
