"""Boundary features: per-channel 3x3 erosion-then-dilation denoising plus a 1x1 mapping."""
from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F


def _as_4d(x: torch.Tensor) -> tuple[torch.Tensor, int]:
    if x.dim() == 2:
        return x[None, None], 2
    if x.dim() == 3:
        return x[None], 3
    return x, 4


def _restore(x: torch.Tensor, ndim: int) -> torch.Tensor:
    if ndim == 2:
        return x[0, 0]
    if ndim == 3:
        return x[0]
    return x


def min_filter3(x: torch.Tensor) -> torch.Tensor:
    """3x3 minimum with replicate padding; ``[B, C, H, W]`` in and out."""
    return -F.max_pool2d(F.pad(-x, (1, 1, 1, 1), mode="replicate"), 3, stride=1)


def max_filter3(x: torch.Tensor) -> torch.Tensor:
    return F.max_pool2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), 3, stride=1)


def closing_op(feature: torch.Tensor) -> torch.Tensor:
    """Denoise each channel: pad, 3x3 erosion, pad, 3x3 dilation.

    Accepts ``[H, W]``, ``[C, H, W]`` or ``[B, C, H, W]``; the output has the
    input's shape.  Isolated bright points vanish, dark pits survive (the
    erosion-first order is what morphology textbooks call an opening).
    """
    x, ndim = _as_4d(feature)
    return _restore(max_filter3(min_filter3(x)), ndim)


class BoundaryBranch(nn.Module):
    """``X_b = conv1x1(closing_op(X_p) + X_p)`` with an independent 1x1 conv per level."""

    def __init__(self, dim: int, levels=(2, 3, 4)):
        super().__init__()
        self.levels = tuple(levels)
        self.maps = nn.ModuleDict({str(lvl): nn.Conv2d(dim, dim, 1) for lvl in self.levels})

    def boundary_features(self, x: torch.Tensor, level: int) -> torch.Tensor:
        return self.maps[str(level)](closing_op(x) + x)

    def forward(self, levels: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
        return {lvl: self.boundary_features(levels[lvl], lvl) for lvl in self.levels if lvl in levels}
