"""Shared transformer pieces: sine position encodings, dense multi-head attention, FFN."""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


def sine_encode_points(xy: torch.Tensor, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """Fixed sine encoding of normalized ``(x, y)`` coordinates.

    Args:
        xy: tensor ``[..., 2]`` with coordinates in ``[0, 1]``.
        dim: output width; half encodes ``y``, half encodes ``x``.

    Returns:
        tensor ``[..., dim]`` laid out as ``(enc(y), enc(x))``.
    """
    if dim % 4:
        raise ValueError(f"position encoding dim must be divisible by 4, got {dim}")
    half = dim // 2
    k = torch.arange(half, dtype=xy.dtype, device=xy.device)
    dim_t = temperature ** (2 * torch.div(k, 2, rounding_mode="floor") / half)
    scaled = xy * (2 * math.pi)
    px = scaled[..., 0:1] / dim_t
    py = scaled[..., 1:2] / dim_t
    px = torch.stack((px[..., 0::2].sin(), px[..., 1::2].cos()), dim=-1).flatten(-2)
    py = torch.stack((py[..., 0::2].sin(), py[..., 1::2].cos()), dim=-1).flatten(-2)
    return torch.cat((py, px), dim=-1)


def pixel_centers(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Normalized pixel-center coordinates ``[H*W, 2]`` in row-major order, as ``(x, y)``."""
    ys = (torch.arange(height, dtype=dtype, device=device) + 0.5) / height
    xs = (torch.arange(width, dtype=dtype, device=device) + 0.5) / width
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack((gx, gy), dim=-1).reshape(-1, 2)


def sine_encode_map(height: int, width: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Position encoding for every pixel of an ``H x W`` map as tokens ``[H*W, dim]``."""
    return sine_encode_points(pixel_centers(height, width, dtype, device), dim)


class MultiHeadAttention(nn.Module):
    """Dense scaled dot-product attention with separate q/k/v/out projections.

    When ``record`` is set the last attention probabilities ``[B, heads, Nq, Nk]``
    are kept on ``last_attention`` for inspection.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError("dim must be divisible by num_heads")
        self.dim = dim
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.record = False
        self.last_attention: torch.Tensor | None = None
        for lin in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor) -> torch.Tensor:
        b, nq, d = query.shape
        nk = key.shape[1]
        h = self.num_heads
        q = self.q_proj(query).view(b, nq, h, d // h).transpose(1, 2)
        k = self.k_proj(key).view(b, nk, h, d // h).transpose(1, 2)
        v = self.v_proj(value).view(b, nk, h, d // h).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        attn = logits.softmax(dim=-1)
        if self.record:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, nq, d)
        return self.out_proj(out)


class FFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class MLP(nn.Module):
    """``num_layers`` linear layers with ReLU between them."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module
