"""Point-sampled BCE/Dice losses, matching costs and the weighted set-prediction loss."""
from __future__ import annotations

from dataclasses import dataclass, fields

import torch
from torch.nn import functional as F

from .config import LossConfig, LossWeights
from .deformable import bilinear_sample
from .heads import InstancePredictionSet
from .layers import pixel_centers
from .matching import MatchAssignment, hungarian_match

DICE_EPS = 1.0
PRED_STRIDE = 4


def to_prediction_grid(target_maps: torch.Tensor, size: tuple[int, int], reduce: str = "mean") -> torch.Tensor:
    """Bring ``[M, H, W]`` ground-truth maps onto the ``[M, h, w]`` prediction grid.

    Maps already at ``(h, w)`` pass through.  Otherwise they are zero-padded
    (or cropped) to ``(4h, 4w)`` and pooled over 4x4 cells: ``mean`` gives the
    area coverage, ``max`` keeps any cell a thin structure touches, so a
    2-pixel boundary band never disappears at the prediction stride.
    """
    h, w = size
    if tuple(target_maps.shape[-2:]) == (h, w):
        return target_maps
    s = PRED_STRIDE
    t = target_maps[:, : h * s, : w * s]
    t = F.pad(t, (0, w * s - t.shape[-1], 0, h * s - t.shape[-2]))
    if reduce == "max":
        return F.max_pool2d(t.unsqueeze(1), s)[:, 0]
    if reduce == "mean":
        return F.avg_pool2d(t.unsqueeze(1), s)[:, 0]
    raise ValueError(f"unknown reduction {reduce!r}")


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross entropy computed stably from logits."""
    return (F.softplus(logits) - logits * targets).mean()


def bce_loss(pred_probs: torch.Tensor, targets: torch.Tensor, clamp: float = 1e-12) -> torch.Tensor:
    """Mean of ``-[t log p + (1 - t) log(1 - p)]`` on probabilities (clamped away from 0/1)."""
    p = pred_probs.clamp(clamp, 1 - clamp)
    return -(targets * p.log() + (1 - targets) * (1 - p).log()).mean()


def dice_loss(pred_probs: torch.Tensor, targets: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """``1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)`` over the last axis, averaged over the rest."""
    num = 2 * (pred_probs * targets).sum(-1) + eps
    den = pred_probs.sum(-1) + targets.sum(-1) + eps
    return (1 - num / den).mean()


def point_sample(maps: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Bilinear read of ``maps`` ``[M, H, W]`` at normalized ``(x, y)`` points ``[M, K, 2]`` -> ``[M, K]``."""
    return bilinear_sample(maps.unsqueeze(1), points)[:, 0]


def uncertainty_points(logits: torch.Tensor, num_points: int, oversample_ratio: float,
                       importance_ratio: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Points biased toward ``|logit| ~ 0`` mixed with uniform ones, per map of ``[M, H, W]``."""
    m = logits.shape[0]
    n_over = max(int(num_points * oversample_ratio), num_points)
    cand = torch.rand(m, n_over, 2, generator=generator, dtype=logits.dtype)
    with torch.no_grad():
        uncertainty = -point_sample(logits.detach(), cand).abs()
    n_imp = int(importance_ratio * num_points)
    idx = uncertainty.topk(n_imp, dim=1).indices
    chosen = torch.gather(cand, 1, idx[..., None].expand(-1, -1, 2))
    n_rand = num_points - n_imp
    if n_rand:
        chosen = torch.cat([chosen, torch.rand(m, n_rand, 2, generator=generator, dtype=logits.dtype)], 1)
    return chosen


def sample_points(logit_map: torch.Tensor, target_map: torch.Tensor, num_points: int = 112 * 112,
                  strategy: str = "importance", generator: torch.Generator | None = None,
                  oversample_ratio: float = 3.0, importance_ratio: float = 0.75, reduce: str = "mean"):
    """Read predictions and binary targets at a common point set.

    ``logit_map`` ``[M, h, w]`` and ``target_map`` ``[M, H, W]`` may differ in
    resolution; targets are first pooled onto the prediction grid with
    ``reduce`` (see :func:`to_prediction_grid`).  ``strategy`` is
    ``importance`` (uncertainty-biased), ``uniform`` or ``dense`` (every pixel
    center of ``logit_map``).  Targets are read bilinearly and thresholded at 0.5.

    Returns ``(pred_logits [M, K], target_values [M, K])``.
    """
    m, h, w = logit_map.shape
    dtype = logit_map.dtype
    if strategy == "dense":
        pts = pixel_centers(h, w, dtype).unsqueeze(0).expand(m, -1, -1)
    elif strategy == "uniform":
        pts = torch.rand(m, num_points, 2, generator=generator, dtype=dtype)
    elif strategy == "importance":
        pts = uncertainty_points(logit_map, num_points, oversample_ratio, importance_ratio, generator)
    else:
        raise ValueError(f"unknown point sampling strategy {strategy!r}")
    pred = point_sample(logit_map, pts)
    grid = to_prediction_grid(target_map.to(dtype), (h, w), reduce)
    target = (point_sample(grid, pts) >= 0.5).to(dtype)
    return pred, target


def _pair_bce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """``[N, K]`` logits vs ``[G, K]`` targets -> mean BCE matrix ``[G, N]``."""
    k = logits.shape[1]
    pos = F.softplus(logits).sum(1)  # [N]
    return (pos[None, :] - targets @ logits.T) / k


def _pair_dice(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    p = logits.sigmoid()
    num = 2 * targets @ p.T + DICE_EPS
    den = p.sum(1)[None, :] + targets.sum(1)[:, None] + DICE_EPS
    return 1 - num / den


@torch.no_grad()
def match_cost(prediction: InstancePredictionSet, target: dict, w: LossWeights,
               mask_points: torch.Tensor | None, boundary_points: torch.Tensor | None) -> torch.Tensor:
    """Cost matrix ``[G, N]`` mirroring the training loss terms for one image.

    ``prediction`` holds one image (``location_logits [N]``, maps ``[N, h, w]``);
    ``target`` has ``masks`` and ``boundaries`` ``[G, H, W]``.  Point sets are
    ``[K, 2]``; ``None`` means every pixel center of the prediction map.
    """
    gt_masks = target["masks"]
    g = gt_masks.shape[0]
    n = prediction.location_logits.shape[0]
    dtype = prediction.mask_logits.dtype
    if g == 0:
        return torch.zeros(0, n, dtype=dtype)
    h, w_ = prediction.mask_logits.shape[-2:]

    def read(pred_maps, gt_maps, pts, reduce):
        if pts is None:
            pts = pixel_centers(h, w_, dtype)
        pl = point_sample(pred_maps, pts.unsqueeze(0).expand(pred_maps.shape[0], -1, -1))
        grid = to_prediction_grid(gt_maps.to(dtype), (h, w_), reduce)
        tl = (point_sample(grid, pts.unsqueeze(0).expand(gt_maps.shape[0], -1, -1)) >= 0.5).to(dtype)
        return pl, tl

    pm, tm = read(prediction.mask_logits, gt_masks, mask_points, "mean")
    pb, tb = read(prediction.boundary_logits, target["boundaries"], boundary_points, "max")
    loc = F.softplus(-prediction.location_logits)  # BCE against target 1
    mask_term = _pair_bce(pm, tm) + _pair_dice(pm, tm)
    bnd_term = _pair_bce(pb, tb) + _pair_dice(pb, tb)
    return w.lam_loc * loc[None, :] + w.alpha * w.lam * mask_term + w.beta * w.lam * bnd_term


@dataclass
class LossBreakdown:
    loc_bce: torch.Tensor
    mask_bce: torch.Tensor
    mask_dice: torch.Tensor
    boundary_bce: torch.Tensor
    boundary_dice: torch.Tensor
    total: torch.Tensor

    TERMS = ("loc_bce", "mask_bce", "mask_dice", "boundary_bce", "boundary_dice", "total")

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def combine_losses(loc_bce, mask_bce, mask_dice, boundary_bce, boundary_dice, w: LossWeights) -> LossBreakdown:
    """``lam_loc * L_loc + alpha * lam * (bce + dice)_mask + beta * lam * (bce + dice)_boundary``."""
    total = (w.lam_loc * loc_bce + w.alpha * w.lam * (mask_bce + mask_dice)
             + w.beta * w.lam * (boundary_bce + boundary_dice))
    as_t = lambda v: v if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.float64)
    return LossBreakdown(*(as_t(v) for v in (loc_bce, mask_bce, mask_dice, boundary_bce, boundary_dice, total)))


def compute_assignments(stages: list[InstancePredictionSet], targets: list[dict], cfg: LossConfig,
                        generator: torch.Generator | None = None) -> list[list[MatchAssignment]]:
    """Per-stage, per-image Hungarian assignments ``[stage][image]``."""
    out = []
    for stage in stages:
        per_image = []
        for i, tgt in enumerate(targets):
            pred = stage.image(i)
            if cfg.sampling == "dense":
                mp = bp = None
            else:
                dtype = pred.mask_logits.dtype
                mp = torch.rand(cfg.num_points, 2, generator=generator, dtype=dtype)
                bp = torch.rand(cfg.num_points, 2, generator=generator, dtype=dtype)
            cost = match_cost(pred, tgt, cfg.weights, mp, bp)
            per_image.append(hungarian_match(cost.double().cpu().numpy()))
        out.append(per_image)
    return out


def _instance_terms(logits, gt, cfg: LossConfig, generator, reduce):
    pred, tgt = sample_points(logits, gt, cfg.num_points, cfg.sampling, generator,
                              cfg.oversample_ratio, cfg.importance_ratio, reduce)
    bce = (F.softplus(pred) - pred * tgt).mean(1)
    p = pred.sigmoid()
    dice = 1 - (2 * (p * tgt).sum(1) + DICE_EPS) / (p.sum(1) + tgt.sum(1) + DICE_EPS)
    return bce, dice


def total_loss(stages: list[InstancePredictionSet], targets: list[dict], cfg: LossConfig,
               assignments: list[list[MatchAssignment]] | None = None,
               generator: torch.Generator | None = None) -> LossBreakdown:
    """Deep-supervised set-prediction loss averaged over decoder stages.

    Matched queries are supervised on mask, boundary and location (target 1);
    unmatched queries only on location (target 0).  Matched pairs are visited
    in prediction-index order so the random point draws do not depend on the
    order of the ground-truth instances.
    """
    if assignments is None:
        assignments = compute_assignments(stages, targets, cfg, generator)
    w = cfg.weights
    acc = {k: 0.0 for k in ("loc", "mb", "md", "bb", "bd")}
    for stage, stage_assign in zip(stages, assignments):
        loc_target = torch.zeros_like(stage.location_logits)
        pred_masks, gt_masks, pred_bnd, gt_bnd = [], [], [], []
        for i, (assign, tgt) in enumerate(zip(stage_assign, targets)):
            pairs = sorted(assign.pairs, key=lambda p: p[1])
            for g, n in pairs:
                loc_target[i, n] = 1.0
                pred_masks.append(stage.mask_logits[i, n])
                pred_bnd.append(stage.boundary_logits[i, n])
                gt_masks.append(tgt["masks"][g])
                gt_bnd.append(tgt["boundaries"][g])
        acc["loc"] = acc["loc"] + bce_with_logits(stage.location_logits, loc_target)
        if pred_masks:
            mb, md = _instance_terms(torch.stack(pred_masks), torch.stack(gt_masks), cfg, generator, "mean")
            bb, bd = _instance_terms(torch.stack(pred_bnd), torch.stack(gt_bnd), cfg, generator, "max")
            acc["mb"] = acc["mb"] + mb.mean()
            acc["md"] = acc["md"] + md.mean()
            acc["bb"] = acc["bb"] + bb.mean()
            acc["bd"] = acc["bd"] + bd.mean()
    s = len(stages)
    zero = stages[0].location_logits.sum() * 0
    vals = [acc[k] / s if torch.is_tensor(acc[k]) else zero for k in ("loc", "mb", "md", "bb", "bd")]
    return combine_losses(*vals, w)
