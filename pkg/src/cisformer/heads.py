"""High-resolution features and the location / mask / boundary prediction heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .layers import MLP


class StrideMismatchError(ValueError):
    pass


@dataclass
class HighResFeatures:
    fused: torch.Tensor  # X_en, also the stride-4 decoder input when level 1 is decoded
    mask: torch.Tensor
    boundary: torch.Tensor


@dataclass
class InstancePredictionSet:
    """Batched per-stage outputs: ``location_logits [B, N]``, maps ``[B, N, h, w]``."""

    location_logits: torch.Tensor
    mask_logits: torch.Tensor
    boundary_logits: torch.Tensor
    stage_index: int

    def image(self, i: int) -> "InstancePredictionSet":
        return InstancePredictionSet(self.location_logits[i], self.mask_logits[i],
                                     self.boundary_logits[i], self.stage_index)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class HighResModule(nn.Module):
    """``X_en = conv(X_e1) + up2(X_m2)``; separate 3x3 convs give mask and boundary maps."""

    def __init__(self, in_channels: int, dim: int):
        super().__init__()
        self.enhance = nn.Conv2d(in_channels, dim, 1)
        self.mask_map = nn.Conv2d(dim, dim, 3, padding=1)
        self.boundary_map = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x_e1: torch.Tensor, x_m2: torch.Tensor) -> HighResFeatures:
        if tuple(x_e1.shape[-2:]) != (2 * x_m2.shape[-2], 2 * x_m2.shape[-1]):
            raise StrideMismatchError(
                f"stride-4 map {tuple(x_e1.shape[-2:])} is not twice the stride-8 map {tuple(x_m2.shape[-2:])}")
        fused = self.enhance(x_e1) + upsample2x(x_m2)
        return HighResFeatures(fused, self.mask_map(fused), self.boundary_map(fused))


def dot_product_maps(query_embed: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    """Per-pixel channel dot product: ``[B, N, D] x [B, D, H, W] -> [B, N, H, W]``."""
    return torch.einsum("bnd,bdhw->bnhw", query_embed, features)


class PredictionHeads(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.location = nn.Linear(dim, 1)
        self.mask_embed = MLP(dim, dim, dim, 3)
        self.boundary_embed = MLP(dim, dim, dim, 3)

    def predict_location(self, q: torch.Tensor) -> torch.Tensor:
        return self.location(q).squeeze(-1)

    def predict_mask(self, q: torch.Tensor, x_m_hr: torch.Tensor) -> torch.Tensor:
        return dot_product_maps(self.mask_embed(q), x_m_hr)

    def predict_boundary(self, q: torch.Tensor, x_b_hr: torch.Tensor) -> torch.Tensor:
        return dot_product_maps(self.boundary_embed(q), x_b_hr)

    def forward(self, mask_query, boundary_query, hr: HighResFeatures, stage_index: int) -> InstancePredictionSet:
        return InstancePredictionSet(
            self.predict_location(mask_query),
            self.predict_mask(mask_query, hr.mask),
            self.predict_boundary(boundary_query, hr.boundary),
            stage_index,
        )


def assemble_predictions(
    final_stage: InstancePredictionSet,
    score_threshold: float = 0.5,
    mask_threshold: float = 0.5,
    image_size: tuple[int, int] | None = None,
) -> list[dict]:
    """Turn one image's final-stage logits into instances, without NMS.

    Masks are bilinearly upsampled to ``image_size`` (cropped to it when the
    input was padded) and binarized; queries whose binary mask is empty are
    dropped.  Each instance carries ``score = p_loc * mean(mask prob inside mask)``.
    """
    loc = torch.sigmoid(final_stage.location_logits.detach())
    logits = final_stage.mask_logits.detach()
    if image_size is not None:
        h, w = logits.shape[-2:]
        full = (h * 4, w * 4)
        logits = F.interpolate(logits[None], size=full, mode="bilinear", align_corners=False)[0]
        logits = logits[:, :image_size[0], :image_size[1]]
    probs = torch.sigmoid(logits)
    instances = []
    for n in range(loc.shape[0]):
        p = float(loc[n])
        if p < score_threshold:
            continue
        binary = probs[n] >= mask_threshold
        area = int(binary.sum())
        if area == 0:
            continue
        mask_conf = float(probs[n][binary].double().mean())
        instances.append({
            "query_index": n,
            "location_prob": p,
            "score": p * mask_conf,
            "mask": binary.cpu().numpy().astype(np.uint8),
        })
    return instances
