"""VOC-style detection evaluation (AP at an IoU threshold, all-points envelope)."""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from core.detector import DetectorModel, detect_batch
from core.exceptions import VocabularyError
from core.geometry import ScoredBox, boxes_to_array, pairwise_iou
from core.images import prepare_entry
from core.manifest import DatasetManifest
from utils.helper import config_hash, write_json
from utils.logger import setup_logger

logger = setup_logger('evaluation')

AP_METHOD = 'all_points'


def voc_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changed = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def match_detections(detections: Sequence[Sequence[ScoredBox]], ground_truth: Sequence[Sequence[ScoredBox]],
                     class_id: int, iou_thr: float = 0.5):
    """(scores, tp flags, gt count) for one class, detections in matching order.

    Detections are visited by descending score (earlier image and index first
    on ties). Each takes its highest-IoU ground truth; a ground truth that is
    already matched makes the detection a false positive.
    """
    gt_boxes = [boxes_to_array([g.box for g in gts if g.class_id == class_id]) for gts in ground_truth]
    num_gt = sum(len(g) for g in gt_boxes)
    candidates = []
    for image_index, dets in enumerate(detections):
        for det_index, det in enumerate(dets):
            if det.class_id == class_id:
                candidates.append((-det.score, image_index, det_index, det))
    candidates.sort(key=lambda item: item[:3])

    matched = [np.zeros(len(g), dtype=bool) for g in gt_boxes]
    scores = np.zeros(len(candidates))
    tp = np.zeros(len(candidates), dtype=bool)
    for rank, (_, image_index, _, det) in enumerate(candidates):
        scores[rank] = det.score
        gts = gt_boxes[image_index]
        if len(gts) == 0:
            continue
        overlaps = pairwise_iou(boxes_to_array([det.box]), gts)[0]
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_thr and not matched[image_index][best]:
            matched[image_index][best] = True
            tp[rank] = True
    return scores, tp, num_gt


def average_precision(detections: Sequence[Sequence[ScoredBox]], ground_truth: Sequence[Sequence[ScoredBox]],
                      class_id: int, iou_thr: float = 0.5) -> Optional[float]:
    """AP for one class over a set of images; None when the class has no ground truth."""
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truth)} images")
    _, tp, num_gt = match_detections(detections, ground_truth, class_id, iou_thr)
    if num_gt == 0:
        return None
    if len(tp) == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / num_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    return voc_ap(recall, precision)


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


@dataclass
class EvalReport:
    per_class_ap: Dict[str, Optional[float]]
    map: Optional[float]
    old_mean: Optional[float] = None
    new_mean: Optional[float] = None
    old_classes: List[str] = field(default_factory=list)
    new_classes: List[str] = field(default_factory=list)
    scenario: str = ''
    config_hash: str = ''
    settings: Dict[str, Any] = field(default_factory=dict)

    @property
    def undefined_classes(self) -> List[str]:
        return [name for name, ap in self.per_class_ap.items() if ap is None]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['undefined_classes'] = self.undefined_classes
        return data

    def to_table(self) -> pd.DataFrame:
        rows = []
        for name, ap in self.per_class_ap.items():
            group = 'old' if name in self.old_classes else 'new' if name in self.new_classes else ''
            rows.append({'class': name, 'group': group, 'ap': ap})
        return pd.DataFrame(rows, columns=['class', 'group', 'ap'])

    def format_table(self) -> str:
        table = self.to_table()
        lines = [table.to_string(index=False, na_rep='n/a', float_format=lambda v: f"{v:.4f}")]
        for label, value in (('mAP', self.map), ('old mean', self.old_mean), ('new mean', self.new_mean)):
            lines.append(f"{label}: {'n/a' if value is None else f'{value:.4f}'}")
        return '\n'.join(lines)

    def save(self, path):
        return write_json(path, self.to_dict())


def collect_detections(model: DetectorModel, dataset: DatasetManifest, score_thr: float, nms_thr: float,
                       max_candidates: Optional[int] = 300, batch_size: int = 32):
    """Per-image detections and ground truth in network coordinates."""
    size = model.config.image_size
    dtype = next(model.parameters()).dtype
    detections, truths = [], []
    for start in range(0, len(dataset.images), batch_size):
        chunk = dataset.images[start:start + batch_size]
        tensors = []
        for entry in chunk:
            tensor, targets = prepare_entry(dataset, entry, model.class_names, size)
            tensors.append(tensor)
            truths.append(targets)
        detections.extend(detect_batch(model, torch.stack(tensors).to(dtype), score_thr, nms_thr, max_candidates))
    return detections, truths


def evaluate_model(model: DetectorModel, dataset: DatasetManifest, score_thr: float = 0.05, nms_thr: float = 0.5,
                   iou_thr: float = 0.5, old_classes: Optional[Sequence[str]] = None, scenario: str = '',
                   config: Optional[Dict[str, Any]] = None, max_candidates: Optional[int] = 300) -> EvalReport:
    """Per-class AP and mAP of a model on a manifest whose classes it knows."""
    unknown = [c for c in dataset.classes if c not in model.class_names]
    if unknown:
        raise VocabularyError(f"Dataset classes {unknown} are not in the model vocabulary {model.class_names}")

    detections, truths = collect_detections(model, dataset, score_thr, nms_thr, max_candidates)
    per_class = {}
    for name in dataset.classes:
        per_class[name] = average_precision(detections, truths, model.class_names.index(name), iou_thr)

    old = [c for c in dataset.classes if old_classes is not None and c in old_classes]
    new = [c for c in dataset.classes if c not in old] if old_classes is not None else []
    settings = {'score_thr': score_thr, 'nms_thr': nms_thr, 'iou_thr': iou_thr, 'ap_method': AP_METHOD}
    report = EvalReport(
        per_class_ap=per_class,
        map=_mean(list(per_class.values())),
        old_mean=_mean([per_class[c] for c in old]) if old else None,
        new_mean=_mean([per_class[c] for c in new]) if new else None,
        old_classes=old,
        new_classes=new,
        scenario=scenario,
        config_hash=config_hash(config or settings),
        settings=settings,
    )
    if report.undefined_classes:
        logger.warning(f"AP undefined (no ground truth) for {report.undefined_classes}; excluded from mAP")
    logger.info(f"Evaluated {len(dataset)} images: mAP={report.map}")
    return report
