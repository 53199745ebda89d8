import copy
import json
import os
from typing import Any, Dict, Optional

from core.exceptions import ConfigError
from utils.helper import deep_merge

# Detector settings - toy-scale RetinaNet-shaped network
DETECTOR_SETTINGS = {
    'image_size': [64, 64],             # width, height fed to the network
    'strides': [8, 16],                 # pyramid levels (pixels)
    'scales': [2.0, 3.0],               # anchor side = scale * stride for ratio 1
    'aspect_ratios': [0.5, 1.0, 2.0],   # h / w
    'stage_channels': [16, 32, 32, 32],
    'feature_channels': 32,
    'head_channels': 32,
    'prior_probability': 0.01,
    'pos_iou': 0.5,
    'neg_iou': 0.4,
    'allow_low_quality_matches': True,
    'focal_gamma': 2.0,
    'focal_alpha': 0.25,
}

# Resize presets; only 'toy' is used at desk scale
IMAGE_SIZE_PRESETS = {
    'toy': [64, 64],
    'long_side_512': [512, 512],
    'long_side_1024': [1024, 1024],
}

# Base (non-incremental) training
TRAINING_SETTINGS = {
    'epochs': 30,
    'learning_rate': 1e-3,
    'batch_size': 16,
    'weight_decay': 0.0,
}

# Incremental training - loss weights all 1 as in the reference experiments
DISTILL_SETTINGS = {
    'lambda1': 1.0,
    'lambda2': 1.0,
    'lambda3': 1.0,
    'lambda4': 1.0,
    'k_box': 64,
    'epochs': 15,
    'learning_rate': 1e-3,
    'batch_size': 16,
    'feature_levels': None,             # None = every pyramid output
    'focal_scope': 'auto',              # auto | new | all
    'class_distill_anchors': 'all',     # all | confident
    'confident_threshold': 0.05,
}

EXEMPLAR_SETTINGS = {
    'per_class': 10,
    'total_budget': None,
    'strategy': 'cluster',              # random | mean_closest | cluster
}

# Automatic dataset construction thresholds
DATASET_SETTINGS = {
    'images_per_query': 100,
    'thr_b': 0.01,                      # fraction of image area
    'thr_d': 1.0,                       # combined cosine similarity
    'thr_o': 0.5,                       # fraction of the smaller box area
    'k': 5,
    'workers': 4,
}

PROVIDER_SETTINGS = {
    'image_source': {'type': 'local', 'root': 'corpus/web'},
    'proposals': {'type': 'edges', 'max_boxes': 20},
    'classifier': {'type': 'patch', 'path': 'corpus/patch_classifier.joblib'},
    'embedding': {'type': 'word_vectors', 'path': 'corpus/word_vectors.txt'},
}

EVAL_SETTINGS = {
    'score_thr': 0.05,
    'nms_thr': 0.5,
    'iou_thr': 0.5,
    'max_candidates': 300,
}

TRIGGER_SETTINGS = {
    'unknown_threshold': 0.5,
    'min_observations': 3,
}

PIPELINE_SETTINGS = {
    'mode': 'edge_only',                # edge_only | edge_cloud
    'trainer_url': None,
    'registry_dir': 'registry',
    'work_dir': 'work',
    'eval_manifest': None,
    'exemplar_file': None,
    'old_data_manifest': None,
    'poll_interval_s': 0.5,
    'task_timeout_s': 3600,
}

# Trainer service (edge-cloud); finished tasks beyond the limit are evicted oldest first
SERVICE_SETTINGS = {
    'retain_finished_tasks': 32,
}

DEFAULT_SETTINGS = {
    'seed': 0,
    'detector': DETECTOR_SETTINGS,
    'training': TRAINING_SETTINGS,
    'distill': DISTILL_SETTINGS,
    'exemplars': EXEMPLAR_SETTINGS,
    'dataset': DATASET_SETTINGS,
    'providers': PROVIDER_SETTINGS,
    'eval': EVAL_SETTINGS,
    'trigger': TRIGGER_SETTINGS,
    'pipeline': PIPELINE_SETTINGS,
    'service': SERVICE_SETTINGS,
}

MODES = ('edge_only', 'edge_cloud')


def default_settings() -> Dict[str, Any]:
    return copy.deepcopy(DEFAULT_SETTINGS)


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Merge defaults <- JSON config file <- overrides, then validate"""
    settings = default_settings()
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                file_settings = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(file_settings, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        settings = deep_merge(settings, file_settings)
    if overrides:
        settings = deep_merge(settings, overrides)

    preset = settings['detector'].get('image_size')
    if isinstance(preset, str):
        if preset not in IMAGE_SIZE_PRESETS:
            raise ConfigError(f"Unknown image size preset: {preset}")
        settings['detector']['image_size'] = list(IMAGE_SIZE_PRESETS[preset])

    validate_settings(settings)
    return settings


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


def _unit(value, name):
    _require(isinstance(value, (int, float)) and 0.0 <= value <= 1.0, f"{name} must be in [0, 1], got {value!r}")


def validate_settings(settings: Dict[str, Any]):
    """Raise ConfigError on the first out-of-range value"""
    det = settings['detector']
    strides = det['strides']
    _require(len(strides) >= 1, "detector.strides must not be empty")
    _require(all(s > 0 for s in strides), "detector.strides must be positive")
    _require(all(b > a for a, b in zip(strides, strides[1:])), "detector.strides must be strictly increasing")
    _require(len(det['scales']) >= 1 and len(det['aspect_ratios']) >= 1, "need at least one anchor scale and ratio")
    _require(all(r > 0 for r in det['aspect_ratios']) and all(s > 0 for s in det['scales']),
             "anchor scales and aspect ratios must be positive")
    _require(det['pos_iou'] >= det['neg_iou'], "detector.pos_iou must be >= detector.neg_iou")
    _unit(det['prior_probability'], 'detector.prior_probability')

    distill = settings['distill']
    for key in ('lambda1', 'lambda2', 'lambda3', 'lambda4'):
        _require(distill[key] >= 0, f"distill.{key} must be >= 0")
    _require(int(distill['k_box']) >= 1, "distill.k_box must be >= 1")
    _require(distill['focal_scope'] in ('auto', 'new', 'all'), "distill.focal_scope must be auto, new or all")
    _require(distill['class_distill_anchors'] in ('all', 'confident'),
             "distill.class_distill_anchors must be all or confident")
    for section in ('training', 'distill'):
        _require(settings[section]['epochs'] >= 1, f"{section}.epochs must be >= 1")
        _require(settings[section]['batch_size'] >= 1, f"{section}.batch_size must be >= 1")
        _require(settings[section]['learning_rate'] > 0, f"{section}.learning_rate must be > 0")

    ex = settings['exemplars']
    _require(ex['strategy'] in ('random', 'mean_closest', 'cluster'), f"Unknown exemplar strategy {ex['strategy']!r}")
    _require(ex['per_class'] >= 0, "exemplars.per_class must be >= 0")

    data = settings['dataset']
    _unit(data['thr_b'], 'dataset.thr_b')
    _unit(data['thr_o'], 'dataset.thr_o')
    _require(data['k'] >= 1, "dataset.k must be >= 1")
    _require(data['images_per_query'] >= 1, "dataset.images_per_query must be >= 1")

    ev = settings['eval']
    _unit(ev['score_thr'], 'eval.score_thr')
    _unit(ev['nms_thr'], 'eval.nms_thr')
    _unit(ev['iou_thr'], 'eval.iou_thr')

    _unit(settings['trigger']['unknown_threshold'], 'trigger.unknown_threshold')
    _require(settings['trigger']['min_observations'] >= 1, "trigger.min_observations must be >= 1")

    _require(settings['pipeline']['mode'] in MODES, f"pipeline.mode must be one of {MODES}")
    _require(settings['service']['retain_finished_tasks'] >= 1, "service.retain_finished_tasks must be >= 1")
