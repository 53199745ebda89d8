"""Learning-task orchestration: dataset construction, incremental training and model swap.

The same LearningTaskRunner executes download -> build -> train on the edge
(edge_only) and inside the trainer service (edge_cloud); only the placement
differs, so both topologies produce the same snapshot for the same inputs.
"""

import time
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import pandas as pd

from config.settings import MODES
from core.dataset_builder import BuildReport, build_dataset, merge_manifests
from core.distillation import DistillConfig
from core.evaluation import EvalReport, evaluate_model
from core.exceptions import ConfigError, DatasetError, IncrementalDetectionError, TrainingError
from core.exemplars import (ExemplarSet, detector_feature_extractor, images_by_class, load_exemplars,
                            save_exemplars, select_exemplars)
from core.manifest import DatasetManifest
from core.registry import ModelRegistry
from core.snapshot import ModelSnapshot
from core.trainer import TrainingLog, train_incremental
from core.trainer_client import TrainerClient
from providers import build_providers
from utils.helper import write_json
from utils.logger import setup_logger

logger = setup_logger('pipeline')

STAGE_LABELS = {
    'download_images_s': 'Download image',
    'build_dataset_s': 'Build dataset',
    'train_model_s': 'Train model',
    'transfer_model_s': 'Download model',
}

StageCallback = Callable[[str], None]


@dataclass
class PipelineConfig:
    mode: str
    registry_dir: str
    work_dir: str
    trainer_url: Optional[str] = None
    eval_manifest: Optional[str] = None
    exemplar_file: Optional[str] = None
    old_data_manifest: Optional[str] = None
    poll_interval_s: float = 0.5
    task_timeout_s: float = 3600.0
    providers: Dict[str, Any] = field(default_factory=dict)
    distill: Optional[DistillConfig] = None
    exemplars: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"pipeline.mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == 'edge_cloud' and not self.trainer_url:
            raise ConfigError("edge_cloud mode needs a trainer service URL")

    @classmethod
    def from_settings(cls, settings: Dict[str, Any]) -> 'PipelineConfig':
        p = settings['pipeline']
        return cls(
            mode=p['mode'],
            registry_dir=p['registry_dir'],
            work_dir=p['work_dir'],
            trainer_url=p.get('trainer_url'),
            eval_manifest=p.get('eval_manifest'),
            exemplar_file=p.get('exemplar_file'),
            old_data_manifest=p.get('old_data_manifest'),
            poll_interval_s=float(p.get('poll_interval_s', 0.5)),
            task_timeout_s=float(p.get('task_timeout_s', 3600)),
            providers=dict(settings['providers']),
            distill=DistillConfig.from_settings(settings['distill'], settings['detector']),
            exemplars=dict(settings['exemplars']),
        )


@dataclass
class TimingReport:
    mode: str
    download_images_s: float = 0.0
    build_dataset_s: float = 0.0
    train_model_s: float = 0.0
    transfer_model_s: Optional[float] = None    # None: not applicable (edge_only)
    total_s: float = 0.0

    def stage_sum(self) -> float:
        return self.download_images_s + self.build_dataset_s + self.train_model_s + (self.transfer_model_s or 0.0)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_frame(self) -> pd.DataFrame:
        rows = [{'stage': label, 'seconds': getattr(self, key)} for key, label in STAGE_LABELS.items()]
        rows.append({'stage': 'Total', 'seconds': self.total_s})
        return pd.DataFrame(rows, columns=['stage', 'seconds'])

    def format_table(self) -> str:
        header = f"System running time ({self.mode})"
        body = self.to_frame().to_string(index=False, na_rep='N/A', float_format=lambda v: f"{v:.2f}")
        return f"{header}\n{body}"


@dataclass
class TaskResult:
    snapshot: ModelSnapshot
    manifest: DatasetManifest
    build_reports: List[BuildReport]
    training_log: TrainingLog
    timings: Dict[str, float]


def resolve_exemplars(settings: Dict[str, Any], base_snapshot: ModelSnapshot, seed: int) -> Optional[ExemplarSet]:
    """Stored exemplar file if configured, else a fresh selection from the old-class data."""
    p, ex = settings['pipeline'], settings['exemplars']
    if p.get('exemplar_file') and Path(p['exemplar_file']).exists():
        exemplars = load_exemplars(p['exemplar_file'])
        logger.info(f"Loaded {exemplars.total_count} exemplars from {p['exemplar_file']}")
        return exemplars
    if not p.get('old_data_manifest') or (ex['per_class'] <= 0 and not ex.get('total_budget')):
        return None
    old_data = DatasetManifest.load(p['old_data_manifest']).restricted_to(base_snapshot.class_names)
    extractor = detector_feature_extractor(base_snapshot.to_model())
    exemplars = select_exemplars(images_by_class(old_data), extractor, ex['per_class'], ex['strategy'], seed,
                                 ex.get('total_budget'))
    if p.get('exemplar_file'):
        save_exemplars(exemplars, p['exemplar_file'])
    return exemplars


class LearningTaskRunner:
    def execute(self, base_snapshot: ModelSnapshot, class_names: Sequence[str], settings: Dict[str, Any],
                seed: int = 0, exemplars: Optional[ExemplarSet] = None,
                stage_callback: Optional[StageCallback] = None,
                task_dir: Optional[Union[str, Path]] = None) -> TaskResult:
        """download -> build -> train for the requested classes on top of `base_snapshot`."""
        notify = stage_callback or (lambda stage: None)
        class_names = list(dict.fromkeys(class_names))
        if not class_names:
            raise TrainingError("A learning task needs at least one class name")
        known = set(class_names) & set(base_snapshot.class_names)
        if known:
            raise TrainingError(f"Classes already known to the model: {sorted(known)}")

        # Provider setup counts as download time; everything else before training counts as build time
        started = time.perf_counter()
        needs_model = settings['providers']['proposals']['type'] == 'deep'
        providers = build_providers(settings, model=base_snapshot.to_model() if needs_model else None)
        setup_s = time.perf_counter() - started

        notify('building')
        manifests, reports = [], []
        for name in class_names:
            manifest, report = build_dataset(name, providers, settings['dataset'])
            manifests.append(manifest)
            reports.append(report)
        merged = merge_manifests(manifests)
        if task_dir is not None:
            task_dir = Path(task_dir)
            merged.save(task_dir / 'manifest.json')
            write_json(task_dir / 'build_reports.json', [r.to_dict() for r in reports])
        download_s = setup_s + sum(r.fetch_s for r in reports)
        timings = {
            'download_images_s': download_s,
            'build_dataset_s': time.perf_counter() - started - download_s,
        }
        empty = [r.query for r in reports if r.retained_images == 0]
        if merged.is_empty or empty:
            raise DatasetError(f"Dataset construction produced no images for {empty or class_names}")

        notify('training')
        started = time.perf_counter()
        cfg = DistillConfig.from_settings(settings['distill'], settings['detector'])
        snapshot, log = train_incremental(base_snapshot, merged, exemplars, cfg, seed=seed)
        if task_dir is not None:
            log.save(task_dir / 'training_log.jsonl')
        timings['train_model_s'] = time.perf_counter() - started
        return TaskResult(snapshot, merged, reports, log, timings)


@dataclass
class LearningOutcome:
    task_id: str
    class_names: List[str]
    snapshot_hash: str
    previous_hash: str
    timing: TimingReport
    build_reports: List[Dict[str, Any]]
    eval_report: Optional[EvalReport] = None
    evidence: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'task_id': self.task_id,
            'class_names': self.class_names,
            'snapshot_hash': self.snapshot_hash,
            'previous_hash': self.previous_hash,
            'timing': self.timing.to_dict(),
            'build_reports': self.build_reports,
            'eval_report': self.eval_report.to_dict() if self.eval_report else None,
            'evidence': self.evidence,
        }


def _evaluate(settings: Dict[str, Any], snapshot: ModelSnapshot, old_classes: Sequence[str]) -> Optional[EvalReport]:
    path = settings['pipeline'].get('eval_manifest')
    if not path:
        return None
    model = snapshot.to_model()
    manifest = DatasetManifest.load(path).restricted_to(model.class_names)
    if manifest.is_empty:
        logger.warning(f"Evaluation manifest {path} has no images of {model.class_names}")
        return None
    ev = settings['eval']
    return evaluate_model(model, manifest, ev['score_thr'], ev['nms_thr'], ev['iou_thr'], old_classes=old_classes,
                          scenario='learn', config=settings, max_candidates=ev['max_candidates'])


def run_learning_task(class_names: Sequence[str], settings: Dict[str, Any], registry: Optional[ModelRegistry] = None,
                      approve: Union[bool, Callable[[List[str]], bool]] = False, seed: int = 0,
                      client: Optional[TrainerClient] = None, evidence: Optional[List[Dict[str, Any]]] = None,
                      runner: Optional[LearningTaskRunner] = None) -> LearningOutcome:
    """Run one approved learning task and swap the served model only after the new one validates.

    Any failure leaves the previous snapshot active; the task directory keeps
    whatever artifacts were produced. Tasks on the same registry run one after
    another, each on top of the model the previous one activated.
    """
    config = PipelineConfig.from_settings(settings)
    registry = registry or ModelRegistry(config.registry_dir)
    class_names = list(dict.fromkeys(class_names))
    approved = approve(class_names) if callable(approve) else bool(approve)
    if not approved:
        raise TrainingError(f"Learning {class_names} was not approved")

    # One task at a time owns the registry, from reading the base model to the swap
    with registry.task_lock(config.task_timeout_s):
        previous = registry.current_hash()
        if previous is None:
            raise TrainingError("No active model in the registry; train a base model first")
        base = registry.load(previous)

        task_id = uuid.uuid4().hex[:12]
        task_dir = registry.task_dir(task_id)
        write_json(task_dir / 'request.json', {'task_id': task_id, 'class_names': class_names, 'seed': seed,
                                               'mode': config.mode, 'base_snapshot': previous,
                                               'evidence': evidence or []})
        logger.info(f"Task {task_id}: learning {class_names} ({config.mode}) on top of {previous[:12]}")

        try:
            exemplars = resolve_exemplars(settings, base, seed)
            if exemplars is not None:
                save_exemplars(exemplars, task_dir / 'exemplars.json')
            timing = TimingReport(config.mode)
            if config.mode == 'edge_only':
                started = time.perf_counter()
                result = (runner or LearningTaskRunner()).execute(base, class_names, settings, seed, exemplars,
                                                                   task_dir=task_dir)
                timing.total_s = time.perf_counter() - started
                snapshot, reports = result.snapshot, [r.to_dict() for r in result.build_reports]
                stage_times = result.timings
            else:
                client = client or TrainerClient(config.trainer_url)
                client.health()
                remote_id = client.submit(base, class_names, settings, seed, exemplars)
                status = client.wait(remote_id, config.poll_interval_s, config.task_timeout_s)
                if status['status'] != 'done':
                    raise TrainingError(f"Remote task {remote_id} failed: {status.get('error')}")
                started = time.perf_counter()
                snapshot = client.fetch_snapshot(remote_id)
                timing.transfer_model_s = time.perf_counter() - started
                stage_times = status['timings']
                timing.total_s = float(status.get('total_s', 0.0)) + timing.transfer_model_s
                reports = status.get('build_reports', [])
                write_json(task_dir / 'build_reports.json', reports)
            timing.download_images_s = float(stage_times['download_images_s'])
            timing.build_dataset_s = float(stage_times['build_dataset_s'])
            timing.train_model_s = float(stage_times['train_model_s'])

            content_hash = registry.publish(snapshot)
            eval_report = _evaluate(settings, snapshot, base.class_names)
            registry.activate(content_hash)
        except IncrementalDetectionError as e:
            logger.error(f"Task {task_id} aborted, keeping snapshot {previous[:12]}: {e}")
            write_json(task_dir / 'error.json', {'error': str(e), 'type': type(e).__name__})
            raise

    outcome = LearningOutcome(task_id, class_names, content_hash, previous, timing, reports, eval_report,
                              evidence or [])
    write_json(task_dir / 'outcome.json', outcome.to_dict())
    logger.info(f"Task {task_id} done: active snapshot {content_hash[:12]}, total {timing.total_s:.2f}s")
    return outcome
