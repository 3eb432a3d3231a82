"""Full instance segmenter: backbone -> encoder -> query init -> decoder -> heads."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from .backbone import FeaturePyramid, ToyBackbone, extract_multiscale, normalize_image
from .boundary import BoundaryBranch
from .config import ModelConfig
from .decoder import DecoderStageOutput, UnifiedDecoder
from .encoder import DeformableEncoder
from .heads import HighResFeatures, HighResModule, InstancePredictionSet, PredictionHeads
from .queries import LearnedQueries, QuerySet, SalientQueryInit


class FingerprintMismatch(RuntimeError):
    pass


@dataclass
class ModelOutput:
    stages: list[InstancePredictionSet]
    decoder_stages: list[DecoderStageOutput]
    mask_queries: QuerySet
    boundary_queries: QuerySet
    image_size: tuple[int, int]

    @property
    def final(self) -> InstancePredictionSet:
        return self.stages[-1]


class InstanceSegmenter(nn.Module):
    def __init__(self, cfg: ModelConfig, backbone: nn.Module | None = None):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.backbone = backbone if backbone is not None else ToyBackbone(cfg.backbone_channels)
        chans = tuple(getattr(self.backbone, "out_channels", cfg.backbone_channels))
        self.encoder = DeformableEncoder(chans[1:], cfg.encoder)
        scales = cfg.decoder.scales
        boundary_levels = (1, 2, 3, 4) if 1 in scales else (2, 3, 4)
        self.boundary_branch = BoundaryBranch(d, boundary_levels)
        self.high_res = HighResModule(chans[0], d)
        n = cfg.num_queries
        if cfg.init_mask == "A":
            self.mask_init = SalientQueryInit(d, n, cfg.salient)
        else:
            self.mask_init = LearnedQueries(n, d, seed=cfg.salient.seed)
        self.boundary_init: nn.Module | None = None
        if cfg.decoder.update_strategy != "sharing":
            if cfg.init_boundary == "A":
                salient = type(cfg.salient)(cfg.salient.oversample_ratio, cfg.salient.importance_fraction,
                                            cfg.salient.seed + 1)
                self.boundary_init = SalientQueryInit(d, n, salient)
            else:
                self.boundary_init = LearnedQueries(n, d, seed=cfg.salient.seed + 1)
        self.decoder = UnifiedDecoder(d, cfg.decoder)
        self.heads = PredictionHeads(d)

    def features(self, images: torch.Tensor):
        pyramid = extract_multiscale(self.backbone, images)
        encoded = self.encoder(pyramid)
        mask_feats = dict(encoded.levels)
        hr = self.high_res(pyramid[1], mask_feats[2])
        if 1 in self.cfg.decoder.scales:
            mask_feats[1] = hr.fused
        boundary_feats = self.boundary_branch(mask_feats)
        return pyramid, mask_feats, boundary_feats, hr

    def init_queries(self, mask_feats, boundary_feats, batch_size: int) -> tuple[QuerySet, QuerySet]:
        if isinstance(self.mask_init, SalientQueryInit):
            qm = self.mask_init(mask_feats, "mask")
        else:
            qm = self.mask_init(batch_size, "mask")
        if self.boundary_init is None:
            qb = QuerySet(qm.embeddings, qm.positions, "boundary", qm.points)
        elif isinstance(self.boundary_init, SalientQueryInit):
            qb = self.boundary_init(boundary_feats, "boundary")
        else:
            qb = self.boundary_init(batch_size, "boundary")
        return qm, qb

    def forward(self, images: torch.Tensor, normalize: bool = True) -> ModelOutput:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if normalize:
            images = normalize_image(images)
        pyramid, mask_feats, boundary_feats, hr = self.features(images)
        qm, qb = self.init_queries(mask_feats, boundary_feats, images.shape[0])
        stage_outputs = self.decoder(mask_feats, boundary_feats, qm, qb)
        stages = [self.heads(s.mask_query, s.boundary_query, hr, i) for i, s in enumerate(stage_outputs)]
        return ModelOutput(stages, stage_outputs, qm, qb, pyramid.image_size)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def save_checkpoint(path: str | Path, model: InstanceSegmenter, extra: dict | None = None) -> None:
    """Write a flat ``name -> tensor`` map plus the model-config fingerprint."""
    payload = {
        "fingerprint": model.cfg.fingerprint(),
        "tensors": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    gens = {name: m.generator.get_state() for name, m in model.named_modules()
            if isinstance(m, SalientQueryInit)}
    payload["generators"] = gens
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, model: InstanceSegmenter) -> dict:
    """Load weights into ``model``; refuses when the fingerprints differ."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    expected = model.cfg.fingerprint()
    if payload.get("fingerprint") != expected:
        raise FingerprintMismatch(
            f"checkpoint fingerprint {payload.get('fingerprint')} does not match config {expected}")
    model.load_state_dict(payload["tensors"])
    for name, m in model.named_modules():
        if isinstance(m, SalientQueryInit) and name in payload.get("generators", {}):
            m.generator.set_state(payload["generators"][name])
    return payload
