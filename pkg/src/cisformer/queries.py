"""Query initialization: salient-point mask queries and learned (random) queries."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .config import SalientPointConfig
from .deformable import bilinear_sample
from .layers import sine_encode_points


class InvalidConfigError(ValueError):
    pass


@dataclass
class QuerySet:
    """Batched queries: ``embeddings`` and ``positions`` are ``[B, N, D]``.

    ``points`` holds the normalized ``(x, y)`` source locations ``[B, N, 2]``
    for salient-point queries and is ``None`` for learned tables.
    """

    embeddings: torch.Tensor
    positions: torch.Tensor
    role: str
    points: torch.Tensor | None = None

    @property
    def num_queries(self) -> int:
        return self.embeddings.shape[1]

    def replace(self, embeddings: torch.Tensor, role: str | None = None) -> "QuerySet":
        return QuerySet(embeddings, self.positions, role or self.role, self.points)


def resize_to(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def sample_salient_indices(
    activation: torch.Tensor,
    k: int,
    cfg: SalientPointConfig,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Pick ``k`` distinct pixel indices (row-major) from a single ``[H, W]`` activation.

    ``ceil(oversample_ratio * k)`` candidate pixels are drawn uniformly without
    replacement and scored by ``|activation|``; the ``floor(importance_fraction * k)``
    best candidates are kept (ties -> lower row-major index first) and the rest
    are filled with uniformly random, not yet chosen pixels.
    """
    act = activation.reshape(-1)
    hw = act.numel()
    if k > hw:
        raise InvalidConfigError(f"cannot select {k} points from a {hw}-pixel map")
    n_cand = min(int(math.ceil(cfg.oversample_ratio * k)), hw)
    if n_cand == hw:
        cand = torch.arange(hw)
    else:
        cand = torch.randperm(hw, generator=generator)[:n_cand]
    cand, _ = cand.sort()
    n_imp = min(int(math.floor(cfg.importance_fraction * k)), k)
    scores = act.detach()[cand].abs()
    order = torch.sort(-scores, stable=True).indices
    chosen = cand[order[:n_imp]]
    n_rand = k - n_imp
    if n_rand:
        taken = torch.zeros(hw, dtype=torch.bool)
        taken[chosen] = True
        free = torch.nonzero(~taken).flatten()
        extra = free[torch.randperm(free.numel(), generator=generator)[:n_rand]]
        chosen = torch.cat([chosen, extra])
    return chosen


def indices_to_points(idx: torch.Tensor, height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    ys = torch.div(idx, width, rounding_mode="floor").to(dtype)
    xs = (idx % width).to(dtype)
    return torch.stack(((xs + 0.5) / width, (ys + 0.5) / height), dim=-1)


def gather_points(feature: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Bilinear gather of ``feature`` ``[B, D, H, W]`` at ``points`` ``[B, N, 2]`` -> ``[B, N, D]``."""
    return bilinear_sample(feature, points).transpose(1, 2)


class SalientQueryInit(nn.Module):
    """Mask queries seeded at salient points of the integrated multi-scale features.

    ``integrate_levels`` sums one-channel convolutions of every level resized to
    the finest level; the same resize-and-sum of the raw features, gated by the
    sigmoid of that activation, is the source the query embeddings are read from.
    """

    def __init__(self, dim: int, num_queries: int, cfg: SalientPointConfig, levels=(2, 3, 4)):
        super().__init__()
        self.dim = dim
        self.num_queries = num_queries
        self.cfg = cfg
        self.levels = tuple(levels)
        self.integrate = nn.ModuleDict({str(l): nn.Conv2d(dim, 1, 1) for l in self.levels})
        self.generator = torch.Generator().manual_seed(cfg.seed)

    def integrate_levels(self, levels: dict[int, torch.Tensor]) -> torch.Tensor:
        size = levels[self.levels[0]].shape[-2:]
        return sum(resize_to(self.integrate[str(l)](levels[l]), size) for l in self.levels)

    def source_feature(self, levels: dict[int, torch.Tensor], activation: torch.Tensor) -> torch.Tensor:
        size = levels[self.levels[0]].shape[-2:]
        merged = sum(resize_to(levels[l], size) for l in self.levels)
        return merged * torch.sigmoid(activation)

    def forward(self, levels: dict[int, torch.Tensor], role: str = "mask") -> QuerySet:
        activation = self.integrate_levels(levels)
        source = self.source_feature(levels, activation)
        b, _, h, w = activation.shape
        # eval: a fresh generator per call so identical images give identical queries
        gen = self.generator if self.training else torch.Generator().manual_seed(self.cfg.seed)
        idx = torch.stack([
            sample_salient_indices(activation[i, 0], self.num_queries, self.cfg, gen) for i in range(b)
        ])
        points = indices_to_points(idx, h, w, activation.dtype).to(activation.device)
        emb = gather_points(source, points)
        pos = sine_encode_points(points, self.dim)
        return QuerySet(emb, pos, role, points)


class LearnedQueries(nn.Module):
    """Content-independent query table plus a learned position table (std 0.02 normal init)."""

    def __init__(self, num_queries: int, dim: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.embed = nn.Parameter(torch.randn(num_queries, dim, generator=gen) * 0.02)
        self.pos = nn.Parameter(torch.randn(num_queries, dim, generator=gen) * 0.02)

    def forward(self, batch_size: int, role: str = "boundary") -> QuerySet:
        e = self.embed.unsqueeze(0).expand(batch_size, -1, -1)
        p = self.pos.unsqueeze(0).expand(batch_size, -1, -1)
        return QuerySet(e, p, role)


def init_boundary_queries(n: int, d: int, seed: int, batch_size: int = 1) -> QuerySet:
    if n <= 0 or d <= 0:
        raise InvalidConfigError("query count and dim must be positive")
    return LearnedQueries(n, d, seed)(batch_size, "boundary")
