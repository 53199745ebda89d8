"""Detection training losses and per-anchor target assignment."""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from core.anchors import encode_array
from core.geometry import IGNORE, ScoredBox, boxes_to_array, match_anchors

PROB_EPS = 1e-7


def smooth_l1(residual: torch.Tensor) -> torch.Tensor:
    """Elementwise 0.5 x^2 if |x| < 1 else |x| - 0.5."""
    return F.smooth_l1_loss(residual, torch.zeros_like(residual), reduction='none', beta=1.0)


def focal_loss(probs: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0, alpha: Optional[float] = 0.25,
               valid_mask: Optional[torch.Tensor] = None, num_positive: Optional[float] = None) -> torch.Tensor:
    """Sigmoid focal loss summed over valid entries, normalized by positives (floor 1).

    probs/targets: [..., K]. valid_mask broadcasts against probs and excludes
    ignored anchors or unsupervised class columns. alpha weights positives by
    alpha and negatives by 1 - alpha; alpha=None disables the weighting, so
    gamma=0 with alpha=None is plain binary cross-entropy.
    """
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    p_t = torch.where(targets > 0.5, p, 1.0 - p)
    loss = -((1.0 - p_t) ** gamma) * torch.log(p_t)
    if alpha is not None:
        alpha_t = torch.where(targets > 0.5, torch.full_like(p, alpha), torch.full_like(p, 1.0 - alpha))
        loss = alpha_t * loss
    if valid_mask is not None:
        loss = loss * valid_mask.to(loss.dtype)
    if num_positive is None:
        positives = targets > 0.5
        if valid_mask is not None:
            positives = positives & valid_mask.bool()
        num_positive = float(positives.any(dim=-1).sum().item())
    return loss.sum() / max(1.0, float(num_positive))


def regression_loss(pred_offsets: torch.Tensor, target_offsets: torch.Tensor,
                    positive_mask: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 summed over the 4 offsets, averaged over positive anchors."""
    mask = positive_mask.bool()
    count = int(mask.sum().item())
    if count == 0:
        return pred_offsets.sum() * 0.0
    residual = pred_offsets[mask] - target_offsets[mask]
    return smooth_l1(residual).sum() / count


@dataclass
class AnchorTargets:
    """Batched training targets aligned with RawPrediction.flat_* outputs."""
    class_targets: torch.Tensor     # [B, N, K] one-hot (zeros for negatives)
    box_targets: torch.Tensor       # [B, N, 4]
    positive: torch.Tensor          # [B, N] bool
    valid: torch.Tensor             # [B, N] bool, False for ignored anchors

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum().item())


def assign_targets(anchors: np.ndarray, targets: Sequence[Sequence[ScoredBox]], num_classes: int,
                   pos_thr: float = 0.5, neg_thr: float = 0.4, allow_low_quality_matches: bool = True,
                   dtype=torch.float32) -> AnchorTargets:
    """Match every image's ground truth against the shared anchor grid."""
    n = len(anchors)
    batch = len(targets)
    class_targets = np.zeros((batch, n, num_classes), dtype=np.float64)
    box_targets = np.zeros((batch, n, 4), dtype=np.float64)
    positive = np.zeros((batch, n), dtype=bool)
    valid = np.ones((batch, n), dtype=bool)

    for b, gt in enumerate(targets):
        assignment = match_anchors(anchors, gt, pos_thr, neg_thr, allow_low_quality_matches)
        valid[b] = assignment != IGNORE
        pos = assignment >= 0
        positive[b] = pos
        if not pos.any():
            continue
        gt_array = boxes_to_array([g.box for g in gt])
        matched = assignment[pos]
        class_targets[b, np.flatnonzero(pos), [gt[i].class_id for i in matched]] = 1.0
        box_targets[b, pos] = encode_array(gt_array[matched], np.asarray(anchors)[pos])

    return AnchorTargets(
        class_targets=torch.as_tensor(class_targets, dtype=dtype),
        box_targets=torch.as_tensor(box_targets, dtype=dtype),
        positive=torch.as_tensor(positive),
        valid=torch.as_tensor(valid),
    )


def detection_losses(probs: torch.Tensor, offsets: torch.Tensor, targets: AnchorTargets,
                     class_columns: Optional[torch.Tensor] = None, gamma: float = 2.0,
                     alpha: Optional[float] = 0.25) -> List[torch.Tensor]:
    """(focal, regression) for a batch.

    class_columns: optional [B, K] bool mask of the class columns each image
    supervises; other columns receive no focal gradient.
    """
    valid = targets.valid[..., None]
    if class_columns is not None:
        valid = valid & class_columns[:, None, :]
    focal = focal_loss(probs, targets.class_targets, gamma, alpha, valid_mask=valid,
                       num_positive=float(targets.num_positive))
    regr = regression_loss(offsets, targets.box_targets, targets.positive)
    return [focal, regr]
