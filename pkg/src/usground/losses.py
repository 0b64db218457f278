"""Composite detection objective: L1 + generalized-IoU box terms over matched
query/ground-truth pairs plus a focal term over all query-token logits.

Boxes are normalized (cx, cy, w, h) in [0,1]^4 throughout this module; the
GIoU computation converts to corner form internally. All functions are
differentiable torch ops so the same code path serves training and the
finite-difference gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .errors import CapacityError, NumericError

# Smallest width/height a predicted box is allowed to reach inside the GIoU
# computation; keeps the loss finite for collapsed predictions early in training.
MIN_BOX_EXTENT = 1e-4

# Bias added to the matching cost so exact ties resolve toward lower query
# indices; far below any meaningful cost difference.
_TIEBREAK_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    l1: float = 5.0
    giou: float = 2.0
    focal: float = 1.0

    def __post_init__(self):
        if self.l1 < 0 or self.giou < 0 or self.focal < 0:
            raise ValueError("loss weights must be non-negative")
        if self.l1 == 0 and self.giou == 0 and self.focal == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class GroundTruth:
    """One annotated object: its normalized cxcywh box and which prompt tokens
    describe it (binary vector over the tokenized prompt)."""

    box: torch.Tensor
    token_targets: torch.Tensor


@dataclass(frozen=True)
class MatchResult:
    """Injective assignment of queries to ground truths; unmatched queries are
    background."""

    pairs: tuple[tuple[int, int], ...]

    def query_for_gt(self, gt_index: int) -> int:
        for q, g in self.pairs:
            if g == gt_index:
                return q
        raise KeyError(gt_index)


def cxcywh_to_xyxy(boxes: torch.Tensor, min_extent: float = 0.0) -> torch.Tensor:
    """Convert (..., 4) center-form boxes to corner form, optionally clamping
    width/height to a minimum extent first."""
    cx, cy, w, h = boxes.unbind(-1)
    if min_extent > 0.0:
        w = w.clamp(min=min_extent)
        h = h.clamp(min=min_extent)
    return torch.stack(
        (cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h), dim=-1
    )


def xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack(
        ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0), dim=-1
    )


def l1_loss(pred_box: torch.Tensor, gt_box: torch.Tensor) -> torch.Tensor:
    """Sum of absolute coordinate differences between two cxcywh boxes."""
    return (pred_box - gt_box).abs().sum(-1)


def _giou_xyxy(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU of same-shape (..., 4) corner-form boxes."""
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = (torch.min(a[..., 2], b[..., 2]) - torch.max(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.min(a[..., 3], b[..., 3]) - torch.max(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    union = area_a + area_b - inter
    cw = torch.max(a[..., 2], b[..., 2]) - torch.min(a[..., 0], b[..., 0])
    ch = torch.max(a[..., 3], b[..., 3]) - torch.min(a[..., 1], b[..., 1])
    enclosing = cw * ch
    return inter / union - (enclosing - union) / enclosing


def giou_loss(pred_box: torch.Tensor, gt_box: torch.Tensor) -> torch.Tensor:
    """1 - GIoU for cxcywh boxes; in [0, 2]. Degenerate predictions are clamped
    to MIN_BOX_EXTENT so the value stays finite."""
    pred = cxcywh_to_xyxy(pred_box, min_extent=MIN_BOX_EXTENT)
    gt = cxcywh_to_xyxy(gt_box)
    return 1.0 - _giou_xyxy(pred, gt)


def giou_loss_xyxy(pred_xyxy: torch.Tensor, gt_xyxy: torch.Tensor) -> torch.Tensor:
    """1 - GIoU for boxes already in corner form (no clamping)."""
    return 1.0 - _giou_xyxy(pred_xyxy, gt_xyxy)


def count_degenerate(pred_boxes: torch.Tensor) -> int:
    """How many predicted cxcywh boxes fall below the GIoU clamping floor."""
    w, h = pred_boxes[..., 2], pred_boxes[..., 3]
    return int(((w < MIN_BOX_EXTENT) | (h < MIN_BOX_EXTENT)).sum())


def focal_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Mean over all entries of -alpha_t (1-p_t)^gamma log(p_t) with
    p = sigmoid(logits); alpha_t is alpha for positives, 1-alpha for negatives."""
    if not torch.isfinite(logits).all():
        raise NumericError("focal loss received non-finite logits")
    targets = targets.to(logits.dtype)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * targets + (1 - p) * (1 - targets)
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return (alpha_t * (1 - p_t).pow(gamma) * ce).mean()


def _pairwise_costs(
    boxes: torch.Tensor,
    logits: torch.Tensor,
    gts: Sequence[GroundTruth],
    weights: LossWeights,
    alpha: float,
    gamma: float,
) -> torch.Tensor:
    """(N, G) matching cost combining the class (focal-form) and box terms."""
    n = boxes.shape[0]
    g = len(gts)
    gt_boxes = torch.stack([gt.box for gt in gts])  # (G, 4)
    l1 = (boxes[:, None, :] - gt_boxes[None, :, :]).abs().sum(-1)
    pred_xyxy = cxcywh_to_xyxy(boxes, min_extent=MIN_BOX_EXTENT)
    gt_xyxy = cxcywh_to_xyxy(gt_boxes)
    giou = 1.0 - _giou_xyxy(pred_xyxy[:, None, :], gt_xyxy[None, :, :])

    # Class cost: the focal form of the loss applied to query q's logits
    # against gt g's token targets, averaged over tokens.
    tgt = torch.stack([gt.token_targets for gt in gts]).to(logits.dtype)  # (G, T)
    lg = logits[:, None, :].expand(n, g, logits.shape[-1])
    tg = tgt[None, :, :].expand(n, g, logits.shape[-1])
    ce = F.binary_cross_entropy_with_logits(lg, tg, reduction="none")
    p = torch.sigmoid(lg)
    p_t = p * tg + (1 - p) * (1 - tg)
    alpha_t = alpha * tg + (1 - alpha) * (1 - tg)
    cls = (alpha_t * (1 - p_t).pow(gamma) * ce).mean(-1)

    return weights.focal * cls + weights.l1 * l1 + weights.giou * giou


def match(
    out,
    gts: Sequence[GroundTruth],
    weights: LossWeights = LossWeights(),
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> MatchResult:
    """Optimal injective assignment of detector queries to ground truths.

    Minimizes the summed pairwise cost via the Hungarian algorithm
    (scipy's linear_sum_assignment); exact ties resolve toward lower query
    indices. `out` is anything with (N,4) `boxes` and (N,T) `logits`.
    """
    boxes, logits = out.boxes, out.logits
    n = boxes.shape[0]
    if len(gts) == 0:
        return MatchResult(pairs=())
    if len(gts) > n:
        raise CapacityError(f"{len(gts)} ground truths but only {n} queries")
    with torch.no_grad():
        cost = _pairwise_costs(boxes, logits, gts, weights, alpha, gamma)
        if not torch.isfinite(cost).all():
            raise NumericError("matching cost matrix contains non-finite entries")
        cost = cost + _TIEBREAK_EPS * torch.arange(n, dtype=cost.dtype)[:, None]
        rows, cols = linear_sum_assignment(cost.cpu().numpy())
    pairs = tuple(sorted(zip(rows.tolist(), cols.tolist()), key=lambda p: p[1]))
    return MatchResult(pairs=pairs)


def total_loss(
    out,
    gts: Sequence[GroundTruth],
    weights: LossWeights = LossWeights(),
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> tuple[torch.Tensor, dict]:
    """Matched composite loss and a per-term breakdown for logging.

    Box terms are summed over matched pairs and normalized by the ground-truth
    count; the focal term runs over every query-token logit with matched
    queries targeting their object's prompt tokens and background queries
    targeting all zeros.
    """
    boxes, logits = out.boxes, out.logits
    result = match(out, gts, weights, alpha, gamma)
    n, t = logits.shape
    num_gt = max(len(gts), 1)

    zero = boxes.new_zeros(())
    l1_sum, giou_sum = zero.clone(), zero.clone()
    targets = logits.new_zeros((n, t))
    for q, g in result.pairs:
        l1_sum = l1_sum + l1_loss(boxes[q], gts[g].box)
        giou_sum = giou_sum + giou_loss(boxes[q], gts[g].box)
        targets[q] = gts[g].token_targets.to(targets.dtype)

    focal = focal_loss(logits, targets, alpha=alpha, gamma=gamma)
    total = (
        weights.l1 * l1_sum / num_gt
        + weights.giou * giou_sum / num_gt
        + weights.focal * focal
    )
    breakdown = {
        "l1": float(l1_sum.detach()) / num_gt,
        "giou": float(giou_sum.detach()) / num_gt,
        "focal": float(focal.detach()),
        "total": float(total.detach()),
        "matched": len(result.pairs),
        "degenerate_boxes": count_degenerate(boxes.detach()),
    }
    return total, breakdown
