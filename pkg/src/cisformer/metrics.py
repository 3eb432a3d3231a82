"""Class-agnostic mask AP over IoU thresholds 0.50:0.05:0.95 (101-point interpolation)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class InvalidMaskError(ValueError):
    pass


@dataclass
class APReport:
    ap: float
    ap50: float
    ap75: float
    per_threshold: dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
                "per_threshold": {f"{k:.2f}": v for k, v in self.per_threshold.items()}}


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise InvalidMaskError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        raise InvalidMaskError("IoU of two empty masks is undefined")
    return float(np.logical_and(a, b).sum() / union)


def iou_matrix(preds: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """``[P, H, W]`` x ``[G, H, W]`` -> ``[P, G]``; empty-vs-empty pairs give 0."""
    if len(preds) == 0 or len(gts) == 0:
        return np.zeros((len(preds), len(gts)))
    p = preds.reshape(len(preds), -1).astype(np.float64)
    g = gts.reshape(len(gts), -1).astype(np.float64)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def _interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    if num_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def evaluate_ap(predictions: list[list[dict]], ground_truths: list[np.ndarray]) -> APReport:
    """COCO-style class-agnostic mask AP.

    Args:
        predictions: per image, a list of ``{"mask": [H, W], "score": float}``.
        ground_truths: per image, ground-truth masks ``[G, H, W]``.

    Predictions from all images are ranked together by score (ties keep input
    order); at each IoU threshold every prediction greedily claims the
    unmatched ground truth it overlaps most, provided the IoU exceeds the
    threshold.  An IoU sitting exactly on a threshold does not count there.
    """
    if len(predictions) != len(ground_truths):
        raise ValueError("predictions and ground truths must cover the same images")
    num_gt = int(sum(len(g) for g in ground_truths))
    ious = []
    ranked = []
    for i, (preds, gts) in enumerate(zip(predictions, ground_truths)):
        masks = np.stack([np.asarray(p["mask"]) for p in preds]) if preds else np.zeros((0,) + np.shape(gts)[1:])
        ious.append(iou_matrix(masks, np.asarray(gts)))
        ranked.extend((float(p["score"]), i, j) for j, p in enumerate(preds))
    order = sorted(range(len(ranked)), key=lambda r: -ranked[r][0])
    ranked = [ranked[r] for r in order]

    per_threshold = {}
    for thr in IOU_THRESHOLDS:
        taken = [np.zeros(len(g), dtype=bool) for g in ground_truths]
        tp = np.zeros(len(ranked))
        for r, (_, img, j) in enumerate(ranked):
            row = ious[img][j] if ious[img].shape[1] else np.zeros(0)
            best, best_iou = -1, thr
            for gi, v in enumerate(row):
                if taken[img][gi] or v <= best_iou:
                    continue
                best, best_iou = gi, v
            if best >= 0:
                taken[img][best] = True
                tp[r] = 1
        per_threshold[round(float(thr), 2)] = _interpolated_ap(tp, num_gt)
    return APReport(
        ap=float(np.mean(list(per_threshold.values()))),
        ap50=per_threshold[0.5],
        ap75=per_threshold[0.75],
        per_threshold=per_threshold,
    )
