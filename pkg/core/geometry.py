"""Box primitives, overlap measures, NMS and anchor matching.

Boxes are stored in corner form (x_min, y_min, x_max, y_max) in pixel
coordinates with the origin at the top-left; center-size form is only used
when encoding regression offsets.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from core.exceptions import GeometryError

NEGATIVE = -1
IGNORE = -2


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        values = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in values):
            raise GeometryError(f"Box coordinates must be finite: {values}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise GeometryError(f"Box corners out of order: {values}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def is_degenerate(self) -> bool:
        return self.width <= 0 or self.height <= 0

    def to_center(self) -> Tuple[float, float, float, float]:
        return (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
            self.width,
            self.height,
        )

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> 'Box':
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    def to_list(self) -> List[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> 'Box':
        if len(values) != 4:
            raise GeometryError(f"Expected 4 box coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    def clip(self, width: float, height: float) -> 'Box':
        return Box(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )

    def scale(self, sx: float, sy: float) -> 'Box':
        return Box(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise GeometryError(f"Score must be in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise GeometryError(f"class_id must be >= 0, got {self.class_id}")


def intersection_area(a: Box, b: Box) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for a zero-area union."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iop(gth: Box, prd: Box) -> float:
    """Intersection over prediction area (asymmetric)."""
    if prd.area <= 0:
        raise GeometryError("iop is undefined for a zero-area prediction")
    return min(1.0, max(0.0, intersection_area(gth, prd) / prd.area))


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.to_list() for b in boxes], dtype=np.float64)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized IoU matrix between (N,4) and (M,4) corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide='ignore', invalid='ignore'):
        result = np.where(union > 0, inter / union, 0.0)
    return np.clip(result, 0.0, 1.0)


def nms(boxes: Sequence[ScoredBox], iou_threshold: float) -> List[ScoredBox]:
    """Greedy class-wise non-maximum suppression.

    Boxes are visited by descending score (ties keep input order); a box is
    kept unless a kept box of the same class overlaps it above the threshold.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise GeometryError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if not boxes:
        return []

    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    coords = boxes_to_array([b.box for b in boxes])
    kept: List[int] = []
    kept_by_class = {}
    for i in order:
        same_class = kept_by_class.setdefault(boxes[i].class_id, [])
        if same_class:
            overlaps = pairwise_iou(coords[i:i + 1], coords[same_class])[0]
            if np.any(overlaps > iou_threshold):
                continue
        same_class.append(i)
        kept.append(i)
    return [boxes[i] for i in kept]


def match_anchors(anchors, gt: Sequence[ScoredBox], pos_thr: float, neg_thr: float,
                  allow_low_quality_matches: bool = False) -> np.ndarray:
    """Assign every anchor to a ground-truth index, NEGATIVE (-1) or IGNORE (-2).

    `anchors` is a list of Box or an (N,4) corner array. Positive iff the
    anchor's max IoU >= pos_thr (argmax gt, lowest index on ties); negative iff
    max IoU < neg_thr. With allow_low_quality_matches each gt's best anchor is
    also made positive when their IoU is non-zero.
    """
    if pos_thr < neg_thr:
        raise GeometryError(f"pos_thr ({pos_thr}) must be >= neg_thr ({neg_thr})")
    if isinstance(anchors, np.ndarray):
        anchor_array = anchors.astype(np.float64, copy=False).reshape(-1, 4)
    else:
        anchor_array = boxes_to_array(list(anchors))
    assignment = np.full(len(anchor_array), NEGATIVE, dtype=np.int64)
    if len(gt) == 0 or len(anchor_array) == 0:
        return assignment

    overlaps = pairwise_iou(anchor_array, boxes_to_array([g.box for g in gt]))
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(len(anchor_array)), best_gt]

    assignment[best_iou >= neg_thr] = IGNORE
    positive = best_iou >= pos_thr
    assignment[positive] = best_gt[positive]

    if allow_low_quality_matches:
        for g in range(overlaps.shape[1]):
            column = overlaps[:, g]
            best = column.max()
            if best <= 0:
                continue
            # every anchor tied at the best IoU for this gt
            for a in np.flatnonzero(column == best):
                if assignment[a] < 0:
                    assignment[a] = g
    return assignment
