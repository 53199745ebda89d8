"""Distillation losses against a frozen copy of the pre-expansion model.

The training objective is

    focal + lambda1 * regression + lambda2 * class_distill
          + lambda3 * box_distill + lambda4 * feature_distill

where the distillation terms compare the expanded student with the frozen
teacher on the same images.
"""

import copy
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import torch

from core.detector import DetectorModel, RawPrediction
from core.exceptions import DistillationError
from core.geometry import ScoredBox
from core.losses import assign_targets, detection_losses, smooth_l1
from core.snapshot import parameter_hash

SOURCE_NEW = 'new'
SOURCE_EXEMPLAR = 'exemplar'


@dataclass
class DistillConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0
    k_box: int = 64
    epochs: int = 15
    learning_rate: float = 1e-3
    batch_size: int = 16
    feature_levels: Optional[List[int]] = None
    focal_scope: str = 'auto'
    class_distill_anchors: str = 'all'
    confident_threshold: float = 0.05
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    allow_low_quality_matches: bool = True
    focal_gamma: float = 2.0
    focal_alpha: Optional[float] = 0.25
    weight_decay: float = 0.0

    def __post_init__(self):
        for name in ('lambda1', 'lambda2', 'lambda3', 'lambda4'):
            if getattr(self, name) < 0:
                raise DistillationError(f"{name} must be >= 0")
        if self.k_box < 1:
            raise DistillationError("k_box must be >= 1")
        if self.focal_scope not in ('auto', 'new', 'all'):
            raise DistillationError(f"Unknown focal_scope {self.focal_scope!r}")
        if self.class_distill_anchors not in ('all', 'confident'):
            raise DistillationError(f"Unknown class_distill_anchors {self.class_distill_anchors!r}")

    @property
    def resolved_focal_scope(self) -> str:
        if self.focal_scope != 'auto':
            return self.focal_scope
        return 'new' if self.lambda2 > 0 else 'all'

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_settings(cls, distill: Dict[str, Any], detector: Optional[Dict[str, Any]] = None) -> 'DistillConfig':
        fields = {k: v for k, v in distill.items() if k in cls.__dataclass_fields__}
        if detector:
            fields.setdefault('pos_iou', detector['pos_iou'])
            fields.setdefault('neg_iou', detector['neg_iou'])
            fields.setdefault('allow_low_quality_matches', detector['allow_low_quality_matches'])
            fields.setdefault('focal_gamma', detector['focal_gamma'])
            fields.setdefault('focal_alpha', detector['focal_alpha'])
        return cls(**fields)

    def variant(self, **changes) -> 'DistillConfig':
        data = self.to_dict()
        data.update(changes)
        return DistillConfig(**data)


class FrozenTeacher:
    """Immutable inference-only copy of the model before expansion."""

    def __init__(self, model: DetectorModel):
        self.model = copy.deepcopy(model).freeze()
        self._hash = parameter_hash(self.model)

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    @property
    def class_names(self) -> List[str]:
        return list(self.model.class_names)

    def predict(self, images: torch.Tensor) -> RawPrediction:
        with torch.no_grad():
            return self.model(images)

    def parameter_hash(self) -> str:
        return parameter_hash(self.model)

    def verify_unchanged(self):
        if self.parameter_hash() != self._hash:
            raise DistillationError("Teacher parameters changed during the learning task")


@dataclass
class TrainingBatch:
    images: torch.Tensor                              # [B, 3, H, W]
    targets: List[List[ScoredBox]]                    # class ids in the student vocabulary
    sources: List[str] = field(default_factory=list)  # 'new' | 'exemplar' per image

    def __post_init__(self):
        if not self.sources:
            self.sources = [SOURCE_NEW] * len(self.targets)
        if len(self.sources) != len(self.targets) or len(self.targets) != self.images.shape[0]:
            raise DistillationError("Batch images, targets and sources must align")


@dataclass
class TeacherSelection:
    indices: torch.Tensor   # [k] anchor indices
    offsets: torch.Tensor   # [k, 4] teacher offsets
    scores: torch.Tensor    # [k] max old-class probability

    def __len__(self):
        return int(self.indices.numel())


@dataclass
class LossBreakdown:
    focal: torch.Tensor
    regression: torch.Tensor
    dist_class: torch.Tensor
    dist_box: torch.Tensor
    dist_feat: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {
            'focal': float(self.focal.item()),
            'regression': float(self.regression.item()),
            'dist_class': float(self.dist_class.item()),
            'dist_box': float(self.dist_box.item()),
            'dist_feat': float(self.dist_feat.item()),
            'total': float(self.total.item()),
        }


def class_distill_loss(teacher_probs: torch.Tensor, student_probs: torch.Tensor,
                       anchor_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over anchors of (1/m) * sum_i (teacher_i - student_i)^2.

    Both inputs are post-sigmoid [..., m]; anchor_mask ([...], bool) restricts
    the anchors that contribute.
    """
    if teacher_probs.shape != student_probs.shape:
        raise DistillationError(f"Probability shapes differ: {tuple(teacher_probs.shape)} vs "
                                f"{tuple(student_probs.shape)}")
    m = teacher_probs.shape[-1]
    if m == 0:
        raise DistillationError("No old classes: incremental training is undefined")
    per_anchor = ((teacher_probs - student_probs) ** 2).sum(dim=-1) / m
    if anchor_mask is not None:
        count = int(anchor_mask.sum().item())
        if count == 0:
            return per_anchor.sum() * 0.0
        return (per_anchor * anchor_mask.to(per_anchor.dtype)).sum() / count
    return per_anchor.mean()


def select_teacher_boxes(teacher_pred: RawPrediction, k_box: int, image_index: int = 0) -> TeacherSelection:
    """Top-k anchors of one image by teacher confidence (max over old classes).

    Ties go to the lower anchor index.
    """
    if k_box < 1:
        raise DistillationError("k_box must be >= 1")
    logits = teacher_pred.flat_logits()[image_index].detach()
    offsets = teacher_pred.flat_offsets()[image_index].detach()
    scores = torch.sigmoid(logits).max(dim=-1).values
    order = torch.sort(scores, descending=True, stable=True).indices[:k_box]
    return TeacherSelection(indices=order, offsets=offsets[order], scores=scores[order])


def box_distill_loss(teacher_sel: TeacherSelection, student_offsets: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 over (x, y, w, h) summed, mean over the selected anchors.

    student_offsets: [N, 4] flat offsets of the same image.
    """
    if len(teacher_sel) == 0:
        return student_offsets.sum() * 0.0
    residual = student_offsets[teacher_sel.indices] - teacher_sel.offsets
    return smooth_l1(residual).sum() / len(teacher_sel)


def feature_distill_loss(teacher_feats: Sequence[torch.Tensor], student_feats: Sequence[torch.Tensor],
                         levels: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Sum over levels of the element-mean smooth-L1 between feature maps."""
    if len(teacher_feats) != len(student_feats):
        raise DistillationError(f"Level count differs: {len(teacher_feats)} vs {len(student_feats)}")
    if levels is None:
        levels = range(len(teacher_feats))
    total = None
    for level in levels:
        t, s = teacher_feats[level], student_feats[level]
        if t.shape != s.shape:
            raise DistillationError(f"Feature shape mismatch at level {level}: {tuple(t.shape)} vs {tuple(s.shape)}")
        term = smooth_l1(s - t.detach()).mean()
        total = term if total is None else total + term
    if total is None:
        return student_feats[0].sum() * 0.0
    return total


def class_columns_for(sources: Sequence[str], num_old: int, num_total: int, scope: str) -> torch.Tensor:
    """[B, K] mask of class columns each image supervises through the focal term."""
    columns = torch.zeros((len(sources), num_total), dtype=torch.bool)
    for i, source in enumerate(sources):
        if scope == 'all':
            columns[i] = True
        elif source == SOURCE_EXEMPLAR:
            columns[i, :num_old] = True
        else:
            columns[i, num_old:] = True
    return columns


def total_loss(batch: TrainingBatch, student: DetectorModel, teacher: Optional[FrozenTeacher],
               cfg: DistillConfig) -> LossBreakdown:
    """Five-term incremental objective; teacher=None gives plain detector training."""
    images = batch.images.to(next(student.parameters()).dtype)
    student_raw = student(images)
    probs = student_raw.flat_probs()
    offsets = student_raw.flat_offsets()
    num_total = student.num_classes
    image_h, image_w = images.shape[-2:]
    anchors = student.anchors(image_w, image_h).numpy()

    targets = assign_targets(anchors, batch.targets, num_total, cfg.pos_iou, cfg.neg_iou,
                             cfg.allow_low_quality_matches, dtype=probs.dtype)
    zero = probs.sum() * 0.0

    if teacher is None:
        focal, regr = detection_losses(probs, offsets, targets, None, cfg.focal_gamma, cfg.focal_alpha)
        return LossBreakdown(focal, regr, zero, zero, zero, focal + cfg.lambda1 * regr)

    num_old = teacher.num_classes
    if num_total <= num_old:
        raise DistillationError(f"Student has {num_total} classes, teacher {num_old}: nothing was added")
    columns = class_columns_for(batch.sources, num_old, num_total, cfg.resolved_focal_scope)
    focal, regr = detection_losses(probs, offsets, targets, columns, cfg.focal_gamma, cfg.focal_alpha)

    teacher_raw = teacher.predict(images)
    teacher_probs = teacher_raw.flat_probs()

    anchor_mask = None
    if cfg.class_distill_anchors == 'confident':
        anchor_mask = teacher_probs.max(dim=-1).values >= cfg.confident_threshold
    dist_class = class_distill_loss(teacher_probs, probs[..., :num_old], anchor_mask)

    box_terms = []
    for i in range(images.shape[0]):
        selection = select_teacher_boxes(teacher_raw, cfg.k_box, image_index=i)
        box_terms.append(box_distill_loss(selection, offsets[i]))
    dist_box = torch.stack(box_terms).mean()

    dist_feat = feature_distill_loss(teacher_raw.features, student_raw.features, cfg.feature_levels)

    total = (focal + cfg.lambda1 * regr + cfg.lambda2 * dist_class
             + cfg.lambda3 * dist_box + cfg.lambda4 * dist_feat)
    return LossBreakdown(focal, regr, dist_class, dist_box, dist_feat, total)
