"""Cascaded multi-scale decoder fusing mask and boundary query streams."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import DecoderConfig
from .layers import FFN, MultiHeadAttention, sine_encode_map
from .queries import QuerySet


class InvalidDecoderConfig(ValueError):
    pass


@dataclass
class DecoderStageOutput:
    composed: QuerySet
    refined_mask: QuerySet
    refined_boundary: QuerySet
    scale_index: int

    @property
    def mask_query(self) -> torch.Tensor:
        """Query feeding the location and mask heads."""
        return self.composed.embeddings

    @property
    def boundary_query(self) -> torch.Tensor:
        """Query feeding the boundary head.

        Under ``separation`` ``composed`` is the self-refined mask stream and
        ``refined_boundary`` the self-refined boundary stream.
        """
        if self.composed.role == "composed":
            return self.composed.embeddings
        return self.refined_boundary.embeddings


class CrossAttentionLayer(nn.Module):
    """``q + CA(LN(q) + pos_q, tokens + pos_k, tokens)``."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)

    def forward(self, q, q_pos, tokens, token_pos):
        return q + self.attn(self.norm(q) + q_pos, tokens + token_pos, tokens)


class SelfAttentionFFN(nn.Module):
    """Residual pre-norm MHSA followed by a residual pre-norm FFN."""

    def __init__(self, dim: int, num_heads: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FFN(dim, ffn_dim)

    def forward(self, q):
        y = self.norm1(q)
        q = q + self.attn(y, y, y)
        return q + self.ffn(self.norm2(q))


def prepare_scale_features(feature: torch.Tensor, proj: nn.Conv2d, level_embed: torch.Tensor) -> torch.Tensor:
    """1x1 conv, flatten ``[B, D, H, W]`` to tokens ``[B, H*W, D]``, add the level embedding."""
    return proj(feature).flatten(2).transpose(1, 2) + level_embed


class DecoderStage(nn.Module):
    def __init__(self, dim: int, cfg: DecoderConfig):
        super().__init__()
        self.strategy = cfg.update_strategy
        self.mask_proj = nn.Conv2d(dim, dim, 1)
        self.boundary_proj = nn.Conv2d(dim, dim, 1)
        self.mask_level_embed = nn.Parameter(torch.zeros(dim))
        self.boundary_level_embed = nn.Parameter(torch.zeros(dim))
        nn.init.normal_(self.mask_level_embed, std=0.02)
        nn.init.normal_(self.boundary_level_embed, std=0.02)
        self.mask_ca = nn.ModuleList(CrossAttentionLayer(dim, cfg.num_heads) for _ in range(cfg.mask_ca_layers))
        self.boundary_ca = nn.ModuleList(CrossAttentionLayer(dim, cfg.num_heads)
                                         for _ in range(cfg.boundary_ca_layers))
        self.refine = SelfAttentionFFN(dim, cfg.num_heads, cfg.ffn_dim)
        if self.strategy == "separation":
            self.refine_boundary = SelfAttentionFFN(dim, cfg.num_heads, cfg.ffn_dim)

    def mask_cross_attention(self, q: QuerySet, tokens, token_pos) -> QuerySet:
        x = q.embeddings
        for layer in self.mask_ca:
            x = layer(x, q.positions, tokens, token_pos)
        return q.replace(x)

    def boundary_cross_attention(self, q: QuerySet, tokens, token_pos) -> QuerySet:
        x = q.embeddings
        for layer in self.boundary_ca:
            x = layer(x, q.positions, tokens, token_pos)
        return q.replace(x)

    def compose_and_refine(self, qm: QuerySet, qb: QuerySet) -> QuerySet:
        return qm.replace(self.refine(qm.embeddings + qb.embeddings), role="composed")

    def forward(self, qm: QuerySet, qb: QuerySet, xm: torch.Tensor, xb: torch.Tensor, scale: int):
        d, h, w = xm.shape[1:]
        token_pos = sine_encode_map(h, w, d, xm.dtype, xm.device).unsqueeze(0)
        xm_tokens = prepare_scale_features(xm, self.mask_proj, self.mask_level_embed)
        xb_tokens = prepare_scale_features(xb, self.boundary_proj, self.boundary_level_embed)
        qm_ref = self.mask_cross_attention(qm, xm_tokens, token_pos)
        qb_ref = self.boundary_cross_attention(qb, xb_tokens, token_pos)
        if self.strategy == "separation":
            m = qm_ref.replace(self.refine(qm_ref.embeddings), role="mask")
            b = qb_ref.replace(self.refine_boundary(qb_ref.embeddings), role="boundary")
            return DecoderStageOutput(m, qm_ref, b, scale), m, b
        composed = self.compose_and_refine(qm_ref, qb_ref)
        out = DecoderStageOutput(composed, qm_ref, qb_ref, scale)
        next_mask = composed.replace(composed.embeddings, role="mask")
        if self.strategy == "sharing":
            next_boundary = QuerySet(composed.embeddings, qb.positions, "boundary", qb.points)
        else:
            next_boundary = qb_ref
        return out, next_mask, next_boundary


class UnifiedDecoder(nn.Module):
    """One :class:`DecoderStage` per entry of ``cfg.scales`` (coarse to fine by default).

    Next-stage mask queries come from the composed output; next-stage boundary
    queries are the previous stage's boundary cross-attention output.  Under
    ``separation`` each stream refines itself; under ``sharing`` both streams
    continue from the one composed set.
    """

    def __init__(self, dim: int, cfg: DecoderConfig):
        super().__init__()
        if not cfg.scales:
            raise InvalidDecoderConfig("decoder needs at least one scale")
        self.cfg = cfg
        self.stages = nn.ModuleList(DecoderStage(dim, cfg) for _ in cfg.scales)

    def forward(self, mask_feats: dict[int, torch.Tensor], boundary_feats: dict[int, torch.Tensor],
                qm: QuerySet, qb: QuerySet) -> list[DecoderStageOutput]:
        outputs = []
        for stage, scale in zip(self.stages, self.cfg.scales):
            out, qm, qb = stage(qm, qb, mask_feats[scale], boundary_feats[scale], scale)
            outputs.append(out)
        return outputs


def decode(decoder: UnifiedDecoder, pyramids, qm0: QuerySet, qb0: QuerySet) -> list[DecoderStageOutput]:
    """Functional entry point: ``pyramids = (mask_levels, boundary_levels)``."""
    if not decoder.cfg.scales:
        raise InvalidDecoderConfig("decoder needs at least one scale")
    xm, xb = pyramids
    return decoder(xm, xb, qm0, qb0)
