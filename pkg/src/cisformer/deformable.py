"""Multi-scale deformable attention (sparse sampling around reference points)."""
from __future__ import annotations

import math

import torch
from torch import nn


def bilinear_sample(value: torch.Tensor, locations: torch.Tensor) -> torch.Tensor:
    """Sample ``value`` ``[N, C, H, W]`` at normalized ``(x, y)`` ``locations`` ``[N, P, 2]``.

    Pixel centers sit at ``(i + 0.5) / size``; locations outside the map are
    clamped to the border pixels.  Interpolation is written as nested lerps
    ``a + f * (b - a)`` so constant fields come back bit-exact.  Returns ``[N, C, P]``.
    """
    n, c, h, w = value.shape
    px = (locations[..., 0] * w - 0.5).clamp(0, w - 1)
    py = (locations[..., 1] * h - 0.5).clamp(0, h - 1)
    x0f, y0f = px.detach().floor(), py.detach().floor()
    fx, fy = (px - x0f).unsqueeze(1), (py - y0f).unsqueeze(1)
    x0, y0 = x0f.long(), y0f.long()
    x1, y1 = (x0 + 1).clamp(max=w - 1), (y0 + 1).clamp(max=h - 1)
    flat = value.reshape(n, c, h * w)

    def tap(yy, xx):
        return flat.gather(2, (yy * w + xx).unsqueeze(1).expand(-1, c, -1))

    v00, v01, v10, v11 = tap(y0, x0), tap(y0, x1), tap(y1, x0), tap(y1, x1)
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    return top + fy * (bottom - top)


def deformable_sample(
    value_levels: list[torch.Tensor],
    sampling_locations: torch.Tensor,
    attention_weights: torch.Tensor,
) -> torch.Tensor:
    """Weighted sum of bilinearly sampled values.

    Args:
        value_levels: per level ``[B, heads, head_dim, H_l, W_l]``.
        sampling_locations: ``[B, M, heads, L, P, 2]`` normalized ``(x, y)``.
        attention_weights: ``[B, M, heads, L, P]``, summing to one over ``(L, P)``.

    Returns:
        ``[B, M, heads * head_dim]``
    """
    b, m, h, n_levels, n_points, _ = sampling_locations.shape
    head_dim = value_levels[0].shape[2]
    sampled = []
    for lvl, value in enumerate(value_levels):
        hl, wl = value.shape[-2:]
        v = value.reshape(b * h, head_dim, hl, wl)
        loc = sampling_locations[:, :, :, lvl].permute(0, 2, 1, 3, 4).reshape(b * h, m * n_points, 2)
        s = bilinear_sample(v, loc).view(b * h, head_dim, m, n_points)
        sampled.append(s)
    # [B*h, head_dim, M, L, P]
    sampled = torch.stack(sampled, dim=3)
    w = attention_weights.permute(0, 2, 1, 3, 4).reshape(b * h, 1, m, n_levels, n_points)
    out = (sampled * w).sum(dim=(-1, -2))  # [B*h, head_dim, M]
    return out.view(b, h * head_dim, m).transpose(1, 2)


class MultiScaleDeformableAttention(nn.Module):
    """Each query attends to ``num_points`` learned offsets per level per head.

    Offsets are expressed in pixels of the sampled level and added to the
    query's reference point; weights are a per-head softmax over levels x points.
    """

    def __init__(self, dim: int, num_heads: int = 8, num_levels: int = 3, num_points: int = 4):
        super().__init__()
        if dim % num_heads:
            raise ValueError("dim must be divisible by num_heads")
        self.dim = dim
        self.num_heads = num_heads
        self.num_levels = num_levels
        self.num_points = num_points
        self.sampling_offsets = nn.Linear(dim, num_heads * num_levels * num_points * 2)
        self.attention_weights = nn.Linear(dim, num_heads * num_levels * num_points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.zeros_(self.sampling_offsets.weight)
        # Initial offsets fan out radially, one direction per head.
        thetas = torch.arange(self.num_heads, dtype=torch.float32) * (2.0 * math.pi / self.num_heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid.view(self.num_heads, 1, 1, 2).repeat(1, self.num_levels, self.num_points, 1)
        for i in range(self.num_points):
            grid[:, :, i, :] *= i + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.reshape(-1))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def sampling(self, query: torch.Tensor, reference_points: torch.Tensor,
                 spatial_shapes: list[tuple[int, int]]) -> tuple[torch.Tensor, torch.Tensor]:
        """Sampling locations ``[B, M, h, L, P, 2]`` and weights ``[B, M, h, L, P]``."""
        b, m, _ = query.shape
        h, nl, npnt = self.num_heads, self.num_levels, self.num_points
        offsets = self.sampling_offsets(query).view(b, m, h, nl, npnt, 2)
        logits = self.attention_weights(query).view(b, m, h, nl * npnt)
        weights = logits.softmax(-1).view(b, m, h, nl, npnt)
        # offsets are in pixels; normalise by (W, H) of each level
        norm = torch.tensor([[w, hh] for hh, w in spatial_shapes], dtype=query.dtype, device=query.device)
        ref = reference_points.clamp(0.0, 1.0)
        locations = ref[:, :, None, :, None, :] + offsets / norm[None, None, None, :, None, :]
        return locations, weights

    def forward(self, query: torch.Tensor, reference_points: torch.Tensor, value: torch.Tensor,
                spatial_shapes: list[tuple[int, int]]) -> torch.Tensor:
        """
        Args:
            query: ``[B, M, D]`` (position encoding already added).
            reference_points: ``[B, M, L, 2]`` normalized ``(x, y)``.
            value: ``[B, S, D]`` flattened tokens of all levels, row-major per level.
            spatial_shapes: ``(H_l, W_l)`` per level, ``sum(H_l * W_l) == S``.
        """
        b, s, d = value.shape
        if s != sum(hh * w for hh, w in spatial_shapes):
            raise ValueError("value token count does not match spatial_shapes")
        h = self.num_heads
        v = self.value_proj(value)
        levels = []
        start = 0
        for hh, w in spatial_shapes:
            chunk = v[:, start:start + hh * w]
            levels.append(chunk.transpose(1, 2).reshape(b, h, d // h, hh, w))
            start += hh * w
        locations, weights = self.sampling(query, reference_points, spatial_shapes)
        out = deformable_sample(levels, locations, weights)
        return self.output_proj(out)
