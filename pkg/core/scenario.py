"""Class-incremental scenario runner.

A scenario trains a base model on `base_classes`, then learns each entry of
`increments` in turn under every requested variant:

    all_data         fresh model trained on every class seen so far
    catastrophic     plain fine-tuning on the new classes (no distillation, no exemplars)
    no_feat_distill  classification + box distillation
    feat_distill     classification + box + feature distillation

Distillation variants are repeated for each exemplar count of the sweep.
Every (seed, variant, exemplars, step) evaluation becomes one row of a pandas
frame; `summary()` aggregates mean and std over seeds.
"""

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from config.settings import default_settings, validate_settings
from core.detector import DetectorConfig
from core.distillation import DistillConfig
from core.evaluation import EvalReport, evaluate_model
from core.exceptions import ConfigError
from core.exemplars import detector_feature_extractor, images_by_class, select_exemplars
from core.manifest import DatasetManifest
from core.snapshot import ModelSnapshot
from core.trainer import train_base, train_incremental
from utils.helper import config_hash, deep_merge, write_json
from utils.logger import setup_logger

logger = setup_logger('scenario')

VARIANTS = ('all_data', 'catastrophic', 'no_feat_distill', 'feat_distill')
DISTILL_VARIANTS = ('no_feat_distill', 'feat_distill')

# Full-scale published results (percent mAP / seconds); reported next to desk runs, never asserted
FULL_SCALE_REFERENCE = {
    'voc_19_plus_1': {
        'all_data_map': 74.7,
        'catastrophic_map': 3.4,
        'catastrophic_old_class_ap': 0.0,
        'no_feat_distill_map': 60.2,
        'feat_distill_map': 65.0,
    },
    'voc_10_plus_10': {
        'all_data_map': 74.7,
        'catastrophic_map': 33.7,
        'catastrophic_old_class_ap': 0.0,
        'no_feat_distill_map': 62.0,
        'feat_distill_map': 67.9,
    },
    'kitchen_8_plus_1_constructed': {
        'base_old_map': 80.1,
        'slow_cooker': {'old_after': 80.8, 'new': 85.4, 'avg': 81.3},
        'cocktail_shaker': {'old_after': 79.2, 'new': 32.2, 'avg': 74.0},
    },
    'exemplars': {'map_gain_with_10_per_class': [15.0, 40.0], 'speedup_vs_all_data': 38.0},
    'dataset_construction_deep_proposals': {'retention_rate': 64.6, 'fp_rate': 5.37},
    'system_time_s': {
        'edge_only': {'download_images_s': 16, 'build_dataset_s': 44, 'train_model_s': 233,
                      'transfer_model_s': None, 'total_s': 293},
        'edge_cloud': {'download_images_s': 10, 'build_dataset_s': 21, 'train_model_s': 83,
                       'transfer_model_s': 5, 'total_s': 119},
    },
}


@dataclass
class ScenarioSpec:
    name: str
    base_classes: List[str]
    increments: List[List[str]]
    train_manifest: str
    test_manifest: str
    variants: List[str] = field(default_factory=lambda: list(VARIANTS))
    seeds: List[int] = field(default_factory=lambda: [0])
    exemplars_per_class: List[int] = field(default_factory=lambda: [0])
    exemplar_strategy: str = 'cluster'
    base_epochs: Optional[int] = None
    incremental_epochs: Optional[int] = None
    settings: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.base_classes:
            raise ConfigError("Scenario needs at least one base class")
        if not self.increments or any(not step for step in self.increments):
            raise ConfigError("Scenario needs at least one non-empty increment")
        self.increments = [[step] if isinstance(step, str) else list(step) for step in self.increments]
        seen = list(self.base_classes)
        for step in self.increments:
            repeated = set(step) & set(seen)
            if repeated:
                raise ConfigError(f"Increment {step} repeats known classes {sorted(repeated)}")
            seen.extend(step)
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ConfigError(f"Unknown scenario variants {unknown}; expected a subset of {VARIANTS}")
        if not self.seeds:
            raise ConfigError("Scenario needs at least one seed")
        if any(n < 0 for n in self.exemplars_per_class):
            raise ConfigError("Exemplar counts must be >= 0")

    @property
    def all_classes(self) -> List[str]:
        return list(self.base_classes) + [c for step in self.increments for c in step]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def load(cls, path) -> 'ScenarioSpec':
        """Read a JSON scenario; manifest paths are relative to the spec file."""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Scenario spec not found: {path}")
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Scenario spec {path} is not valid JSON: {e}") from e
        try:
            spec = cls(**data)
        except TypeError as e:
            raise ConfigError(f"Scenario spec {path}: {e}") from e
        for key in ('train_manifest', 'test_manifest'):
            value = Path(getattr(spec, key))
            if not value.is_absolute():
                setattr(spec, key, str((path.parent / value).resolve()))
        return spec


@dataclass
class ScenarioReport:
    spec: ScenarioSpec
    rows: List[Dict[str, Any]] = field(default_factory=list)
    reports: List[Dict[str, Any]] = field(default_factory=list)
    config_hash: str = ''

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def summary(self) -> pd.DataFrame:
        """Mean and std over seeds per (variant, exemplars, step)."""
        frame = self.to_frame()
        if frame.empty:
            return frame
        metrics = ['map', 'old_mean', 'new_mean', 'train_s', 'train_images']
        frame[metrics] = frame[metrics].astype(float)
        grouped = frame.groupby(['variant', 'exemplars', 'step'], sort=False)[metrics]
        summary = grouped.agg(['mean', 'std'])
        summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
        return summary.reset_index()

    def final(self, variant: str, exemplars: int = 0) -> pd.DataFrame:
        """Last-step rows of one variant, one per seed."""
        frame = self.to_frame()
        last = frame['step'].max()
        mask = (frame['variant'] == variant) & (frame['exemplars'] == exemplars) & (frame['step'] == last)
        return frame[mask].reset_index(drop=True)

    def format_summary(self) -> str:
        summary = self.summary()
        lines = [f"Scenario {self.spec.name} ({len(self.spec.seeds)} seeds, config {self.config_hash})"]
        lines.append(summary.to_string(index=False, na_rep='n/a', float_format=lambda v: f"{v:.4f}"))
        lines.append("Full-scale reference (not reproduced at desk scale):")
        lines.append(json.dumps(FULL_SCALE_REFERENCE, indent=2))
        return '\n'.join(lines)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'spec': self.spec.to_dict(),
            'config_hash': self.config_hash,
            'rows': self.rows,
            'summary': self.summary().to_dict(orient='records'),
            'reports': self.reports,
            'full_scale_reference': FULL_SCALE_REFERENCE,
        }

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(out_dir / 'rows.csv', index=False)
        return write_json(out_dir / 'scenario_report.json', self.to_dict())


def _variant_config(variant: str, cfg: DistillConfig) -> DistillConfig:
    if variant == 'catastrophic':
        return cfg.variant(lambda2=0.0, lambda3=0.0, lambda4=0.0)
    if variant == 'no_feat_distill':
        return cfg.variant(lambda4=0.0)
    return cfg


def _row(seed: int, variant: str, exemplars: int, step: int, report: EvalReport, train_s: float,
         train_images: int) -> Dict[str, Any]:
    row = {
        'seed': seed,
        'variant': variant,
        'exemplars': exemplars,
        'step': step,
        'map': report.map,
        'old_mean': report.old_mean,
        'new_mean': report.new_mean,
        'train_s': train_s,
        'train_images': train_images,
    }
    row.update({f"ap_{name}": ap for name, ap in report.per_class_ap.items()})
    return row


class ScenarioRunner:
    def __init__(self, spec: ScenarioSpec, settings: Optional[Dict[str, Any]] = None):
        self.spec = spec
        self.settings = deep_merge(settings or default_settings(), spec.settings)
        validate_settings(self.settings)
        self.detector_config = DetectorConfig.from_settings(self.settings['detector'])
        self.base_cfg = DistillConfig.from_settings(self.settings['training'], self.settings['detector'])
        self.incremental_cfg = DistillConfig.from_settings(self.settings['distill'], self.settings['detector'])
        if spec.base_epochs is not None:
            self.base_cfg = self.base_cfg.variant(epochs=spec.base_epochs)
        if spec.incremental_epochs is not None:
            self.incremental_cfg = self.incremental_cfg.variant(epochs=spec.incremental_epochs)
        self.train = DatasetManifest.load(spec.train_manifest)
        self.test = DatasetManifest.load(spec.test_manifest)
        missing = [c for c in spec.all_classes if not self.train.images_for_class(c)]
        if missing:
            raise ConfigError(f"Training manifest has no images for {missing}")

    def evaluate(self, snapshot: ModelSnapshot, classes: Sequence[str], old_classes: Sequence[str],
                 tag: str) -> EvalReport:
        ev = self.settings['eval']
        return evaluate_model(snapshot.to_model(), self.test.restricted_to(classes), ev['score_thr'], ev['nms_thr'],
                              ev['iou_thr'], old_classes=old_classes, scenario=tag,
                              config=self.settings, max_candidates=ev['max_candidates'])

    def _timed_base(self, classes: Sequence[str], seed: int):
        data = self.train.restricted_to(classes)
        started = time.perf_counter()
        snapshot, _ = train_base(data, self.detector_config, self.base_cfg, seed=seed, class_names=classes)
        return snapshot, time.perf_counter() - started, len(data)

    def _run_incremental(self, base: ModelSnapshot, variant: str, exemplar_count: int, seed: int,
                         report: ScenarioReport):
        cfg = _variant_config(variant, self.incremental_cfg)
        current, seen = base, list(self.spec.base_classes)
        for step, new_classes in enumerate(self.spec.increments, start=1):
            exemplars = None
            if exemplar_count > 0:
                old_data = self.train.restricted_to(seen)
                extractor = detector_feature_extractor(current.to_model())
                exemplars = select_exemplars(images_by_class(old_data), extractor, exemplar_count,
                                             self.spec.exemplar_strategy, seed)
            new_data = self.train.restricted_to(new_classes)
            started = time.perf_counter()
            current, log = train_incremental(current, new_data, exemplars, cfg, seed=seed)
            train_s = time.perf_counter() - started
            tag = f"{self.spec.name}/{variant}/ex{exemplar_count}/step{step}/seed{seed}"
            evaluation = self.evaluate(current, seen + new_classes, seen, tag)
            report.rows.append(_row(seed, variant, exemplar_count, step, evaluation, train_s, log.num_images))
            report.reports.append(evaluation.to_dict())
            seen = seen + new_classes

    def _run_all_data(self, seed: int, report: ScenarioReport):
        seen = list(self.spec.base_classes)
        for step, new_classes in enumerate(self.spec.increments, start=1):
            classes = seen + new_classes
            snapshot, train_s, images = self._timed_base(classes, seed)
            tag = f"{self.spec.name}/all_data/step{step}/seed{seed}"
            evaluation = self.evaluate(snapshot, classes, seen, tag)
            report.rows.append(_row(seed, 'all_data', 0, step, evaluation, train_s, images))
            report.reports.append(evaluation.to_dict())
            seen = classes

    def run(self) -> ScenarioReport:
        spec = self.spec
        report = ScenarioReport(spec, config_hash=config_hash({'spec': spec.to_dict(), 'settings': self.settings}))
        for seed in spec.seeds:
            logger.info(f"[{spec.name}] seed {seed}: base model on {spec.base_classes}")
            base, train_s, images = self._timed_base(spec.base_classes, seed)
            evaluation = self.evaluate(base, spec.base_classes, spec.base_classes,
                                       f"{spec.name}/base/seed{seed}")
            report.rows.append(_row(seed, 'base', 0, 0, evaluation, train_s, images))
            report.reports.append(evaluation.to_dict())

            for variant in spec.variants:
                if variant == 'all_data':
                    self._run_all_data(seed, report)
                    continue
                counts = spec.exemplars_per_class if variant in DISTILL_VARIANTS else [0]
                for count in counts:
                    logger.info(f"[{spec.name}] seed {seed}: {variant} with {count} exemplars/class")
                    self._run_incremental(base, variant, count, seed, report)
        logger.info(f"[{spec.name}] finished {len(report.rows)} evaluations")
        return report


def run_scenario(spec: ScenarioSpec, settings: Optional[Dict[str, Any]] = None) -> ScenarioReport:
    return ScenarioRunner(spec, settings).run()
