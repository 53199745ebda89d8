"""Base and incremental training loops.

Both loops share one epoch runner: seeded shuffle, Adam, one record per
optimizer step. Incremental training freezes a teacher copy of the old
model, expands the student's class head and optimizes the five-term
distillation objective on the new data (plus exemplars when given).
"""

import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch

from core.detector import DetectorConfig, DetectorModel, build_detector, expand_class_head
from core.distillation import DistillConfig, FrozenTeacher, TrainingBatch, total_loss
from core.exceptions import DatasetError, DistillationError, TrainingError
from core.exemplars import ExemplarSet, merge_with_new_data
from core.geometry import ScoredBox
from core.images import prepare_entry
from core.manifest import PROVENANCE_NEW, DatasetManifest
from core.snapshot import ModelSnapshot
from utils.helper import set_seed, write_jsonl
from utils.logger import setup_logger

logger = setup_logger('trainer')

LOSS_COLUMNS = ['focal', 'regression', 'dist_class', 'dist_box', 'dist_feat', 'total']


@dataclass
class PreparedSample:
    image: torch.Tensor
    targets: List[ScoredBox]
    source: str
    path: str


@dataclass
class TrainingLog:
    records: List[Dict[str, Any]] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    steps_per_epoch: int = 0
    num_images: int = 0
    wall_s: float = 0.0

    def epoch_summary(self) -> pd.DataFrame:
        """Mean loss components and summed wall-clock per epoch."""
        if not self.records:
            return pd.DataFrame(columns=['epoch'] + LOSS_COLUMNS + ['wall_ms'])
        frame = pd.DataFrame(self.records)
        summary = frame.groupby('epoch')[LOSS_COLUMNS].mean()
        summary['wall_ms'] = frame.groupby('epoch')['wall_ms'].sum()
        return summary.reset_index()

    def final_losses(self) -> Dict[str, float]:
        if not self.records:
            return {}
        summary = self.epoch_summary()
        return {k: float(summary[k].iloc[-1]) for k in LOSS_COLUMNS}

    def save(self, path):
        return write_jsonl(path, self.records)


def prepare_samples(manifest: DatasetManifest, vocabulary: Sequence[str],
                    image_size: Sequence[int]) -> List[PreparedSample]:
    """Load every manifest image at network size with targets in `vocabulary` ids."""
    samples = []
    for entry in manifest.images:
        tensor, targets = prepare_entry(manifest, entry, vocabulary, image_size)
        samples.append(PreparedSample(tensor, targets, entry.provenance or PROVENANCE_NEW, entry.path))
    return samples


def run_epochs(student: DetectorModel, teacher: Optional[FrozenTeacher], samples: Sequence[PreparedSample],
               cfg: DistillConfig, seed: int, log: Optional[TrainingLog] = None) -> TrainingLog:
    if not samples:
        raise TrainingError("Training set is empty")
    log = log or TrainingLog()
    dtype = next(student.parameters()).dtype
    generator = set_seed(seed)
    optimizer = torch.optim.Adam(student.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    n = len(samples)
    log.steps_per_epoch = math.ceil(n / cfg.batch_size)
    log.num_images = n
    student.train()
    started = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=generator).tolist()
        for start in range(0, n, cfg.batch_size):
            step_started = time.perf_counter()
            chosen = [samples[i] for i in order[start:start + cfg.batch_size]]
            batch = TrainingBatch(
                images=torch.stack([s.image for s in chosen]).to(dtype),
                targets=[s.targets for s in chosen],
                sources=[s.source for s in chosen],
            )
            optimizer.zero_grad()
            breakdown = total_loss(batch, student, teacher, cfg)
            if not torch.isfinite(breakdown.total):
                raise TrainingError(f"Non-finite loss at epoch {epoch} step {step}: {breakdown.as_floats()}")
            breakdown.total.backward()
            optimizer.step()

            record = {'epoch': epoch, 'step': step}
            record.update(breakdown.as_floats())
            record['lr'] = optimizer.param_groups[0]['lr']
            record['wall_ms'] = (time.perf_counter() - step_started) * 1000.0
            log.records.append(record)
            logger.debug(f"epoch {epoch} step {step}: total={record['total']:.4f}")
            step += 1
        epoch_rows = [r for r in log.records if r['epoch'] == epoch]
        mean_total = sum(r['total'] for r in epoch_rows) / len(epoch_rows)
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs} done: mean loss {mean_total:.4f}")
    log.wall_s = time.perf_counter() - started
    student.eval()
    return log


def train_base(manifest: DatasetManifest, detector_config: DetectorConfig, cfg: DistillConfig, seed: int = 0,
               class_names: Optional[Sequence[str]] = None,
               samples: Optional[Sequence[PreparedSample]] = None) -> Tuple[ModelSnapshot, TrainingLog]:
    """Train a fresh detector with focal + regression loss only."""
    if manifest.is_empty:
        raise DatasetError("Cannot train a base model on an empty manifest")
    class_names = list(class_names or manifest.classes)
    model = build_detector(detector_config, class_names, seed=seed)
    if samples is None:
        samples = prepare_samples(manifest, class_names, detector_config.image_size)
    logger.info(f"Training base model on {len(samples)} images, classes {class_names}")
    log = TrainingLog(config={'kind': 'base', 'seed': seed, **cfg.to_dict()})
    run_epochs(model, None, samples, cfg, seed, log)
    return ModelSnapshot.from_model(model), log


def train_incremental(old_snapshot: ModelSnapshot, new_data: DatasetManifest, exemplars: Optional[ExemplarSet],
                      cfg: DistillConfig, seed: int = 0) -> Tuple[ModelSnapshot, TrainingLog]:
    """Expand the old model by the manifest's classes and train it with distillation."""
    if new_data.is_empty:
        raise TrainingError("New-class dataset is empty")
    new_classes = [c for c in new_data.classes if new_data.images_for_class(c)]
    if not new_classes:
        raise TrainingError("New-class dataset has no annotated boxes")
    collision = set(new_classes) & set(old_snapshot.class_names)
    if collision:
        raise TrainingError(f"New classes already known to the model: {sorted(collision)}")

    old_model = old_snapshot.to_model()
    try:
        teacher = FrozenTeacher(old_model)
        student = expand_class_head(old_model, len(new_classes), new_classes, seed=seed)
    except DistillationError as e:
        raise TrainingError(str(e)) from e

    combined = merge_with_new_data(exemplars, new_data, seed=seed)
    samples = prepare_samples(combined, student.class_names, student.config.image_size)
    logger.info(f"Incremental training {old_snapshot.class_names} + {new_classes}: "
                f"{len(samples)} images ({len(samples) - len(new_data)} exemplars)")

    log = TrainingLog(config={
        'kind': 'incremental',
        'seed': seed,
        'old_classes': old_snapshot.class_names,
        'new_classes': new_classes,
        'focal_scope': cfg.resolved_focal_scope,
        **cfg.to_dict(),
    })
    run_epochs(student, teacher, samples, cfg, seed, log)
    teacher.verify_unchanged()
    return ModelSnapshot.from_model(student), log
