"""Small four-stage CNN producing a stride-4/8/16/32 feature pyramid."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

STRIDES = (4, 8, 16, 32)


class InvalidInputError(ValueError):
    pass


@dataclass
class FeaturePyramid:
    """Multi-scale features keyed by level index (1 = stride 4 ... 4 = stride 32).

    Each tensor is batched ``[B, C, H, W]``.
    """

    levels: dict[int, torch.Tensor]
    image_size: tuple[int, int]

    def stride(self, level: int) -> int:
        return STRIDES[level - 1]

    def __getitem__(self, level: int) -> torch.Tensor:
        return self.levels[level]

    def shapes(self) -> dict[int, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.levels.items()}


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(min(8, cout), cout),
        nn.ReLU(inplace=True),
    )


class ToyBackbone(nn.Module):
    """Stem of two stride-2 convs, then three stride-2 stages.

    Any module returning four maps at strides 4/8/16/32 can be swapped in
    through :class:`~cisformer.model.InstanceSegmenter`'s ``backbone`` argument.
    """

    def __init__(self, channels=(32, 64, 128, 256)):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.out_channels = tuple(channels)
        self.stem = nn.Sequential(_conv_block(3, c1 // 2, 2), _conv_block(c1 // 2, c1, 2))
        self.stage2 = nn.Sequential(_conv_block(c1, c2, 2), _conv_block(c2, c2, 1))
        self.stage3 = nn.Sequential(_conv_block(c2, c3, 2), _conv_block(c3, c3, 1))
        self.stage4 = nn.Sequential(_conv_block(c3, c4, 2), _conv_block(c4, c4, 1))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x1 = self.stem(x)
        x2 = self.stage2(x1)
        x3 = self.stage3(x2)
        x4 = self.stage4(x3)
        return [x1, x2, x3, x4]


def pad_to_multiple(images: torch.Tensor, multiple: int = 32) -> torch.Tensor:
    h, w = images.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        images = F.pad(images, (0, pw, 0, ph))
    return images


def normalize_image(image: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Per-channel zero-mean / unit-variance normalization of ``[..., 3, H, W]``."""
    mean = image.mean(dim=(-2, -1), keepdim=True)
    std = image.std(dim=(-2, -1), keepdim=True, unbiased=False)
    return (image - mean) / (std + eps)


def extract_multiscale(backbone: nn.Module, image: torch.Tensor) -> FeaturePyramid:
    """Run ``backbone`` on ``[3, H, W]`` or ``[B, 3, H, W]`` input.

    Inputs whose sides are not multiples of 32 are zero-padded on the bottom/right.
    """
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[1] != 3:
        raise InvalidInputError(f"expected a 3-channel image, got shape {tuple(image.shape)}")
    image = pad_to_multiple(image)
    feats = backbone(image)
    if len(feats) != 4:
        raise InvalidInputError("backbone must return four feature maps")
    return FeaturePyramid(levels={i + 1: f for i, f in enumerate(feats)},
                          image_size=tuple(image.shape[-2:]))
