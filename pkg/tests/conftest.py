import copy
import threading

import numpy as np
import pytest
import torch
from werkzeug.serving import make_server

from config.settings import load_config
from core.anchors import AnchorConfig
from core.detector import DetectorConfig, build_detector
from core.distillation import DistillConfig
from core.exceptions import DatasetError
from core.manifest import DatasetManifest
from core.pipeline import TaskResult
from core.shapes import SHAPES, make_corpus
from core.snapshot import ModelSnapshot
from core.trainer import TrainingLog, train_base

BASE_CLASSES = ['circle', 'square', 'triangle']
NEW_CLASS = 'cross'

# Fits the 32x32 network input used by the pipeline tests
TINY_DETECTOR_SETTINGS = {
    'image_size': [32, 32],
    'strides': [8],
    'scales': [2.0],
    'aspect_ratios': [1.0],
    'stage_channels': [8, 8, 8],
    'feature_channels': 8,
    'head_channels': 8,
}


def tiny_detector_config(image_size=(16, 16), channels=4) -> DetectorConfig:
    """Single-level, single-anchor detector with well under 5k parameters."""
    return DetectorConfig(
        anchor=AnchorConfig((8,), (2.0,), (1.0,)),
        image_size=list(image_size),
        stage_channels=[channels] * 3,
        feature_channels=channels,
        head_channels=channels,
    )


@pytest.fixture
def tiny_config():
    return tiny_detector_config()


@pytest.fixture
def tiny_model(tiny_config):
    return build_detector(tiny_config, ['a', 'b'], seed=0).double()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope='session')
def shapes_corpus(tmp_path_factory):
    return make_corpus(tmp_path_factory.mktemp('corpus'), classes=SHAPES[:4], train_per_class=12,
                       test_per_class=6, web_per_class=8, seed=0)


@pytest.fixture(scope='session')
def session_settings(shapes_corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp('settings')
    return load_config(overrides={
        'detector': dict(TINY_DETECTOR_SETTINGS),
        'training': {'epochs': 1, 'batch_size': 8},
        'distill': {'epochs': 1, 'batch_size': 8, 'k_box': 8},
        'exemplars': {'per_class': 0},
        'dataset': {'images_per_query': 6, 'workers': 2},
        'providers': shapes_corpus.provider_settings(),
        'pipeline': {
            'registry_dir': str(root / 'registry'),
            'work_dir': str(root / 'work'),
            'poll_interval_s': 0.05,
            'task_timeout_s': 600,
        },
    })


@pytest.fixture
def settings(session_settings, tmp_path):
    result = copy.deepcopy(session_settings)
    result['pipeline']['registry_dir'] = str(tmp_path / 'registry')
    result['pipeline']['work_dir'] = str(tmp_path / 'work')
    return result


@pytest.fixture(scope='session')
def base_snapshot(shapes_corpus, session_settings):
    """Base model on three shape classes, trained once per session."""
    manifest = shapes_corpus.manifest('train', BASE_CLASSES)
    cfg = DistillConfig.from_settings(session_settings['training'], session_settings['detector'])
    snapshot, _ = train_base(manifest, DetectorConfig.from_settings(session_settings['detector']), cfg, seed=0,
                             class_names=BASE_CLASSES)
    return snapshot


@pytest.fixture
def tiny_snapshot(tiny_config):
    return ModelSnapshot.from_model(build_detector(tiny_config, ['a', 'b'], seed=0))


class StubRunner:
    """Stands in for LearningTaskRunner inside the trainer service."""

    def __init__(self, snapshot, gate=None, error=None):
        self.snapshot = snapshot
        self.gate = gate
        self.error = error
        self.calls = []

    def execute(self, base_snapshot, class_names, settings, seed=0, exemplars=None, stage_callback=None,
                task_dir=None):
        self.calls.append({'class_names': list(class_names), 'seed': seed, 'exemplars': exemplars})
        notify = stage_callback or (lambda stage: None)
        notify('building')
        if self.gate is not None:
            self.gate.wait(timeout=30)
        if self.error is not None:
            raise DatasetError(self.error)
        notify('training')
        timings = {'download_images_s': 0.01, 'build_dataset_s': 0.02, 'train_model_s': 0.03}
        return TaskResult(self.snapshot, DatasetManifest(list(class_names)), [], TrainingLog(), timings)


@pytest.fixture
def stub_runner_cls():
    return StubRunner


@pytest.fixture
def serve_app():
    """Start Flask apps on ephemeral ports; returns their base URLs."""
    running = []

    def start(app):
        server = make_server('127.0.0.1', 0, app, threaded=True)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        running.append((server, thread))
        return f"http://127.0.0.1:{server.server_port}"

    yield start
    for server, thread in running:
        server.shutdown()
        thread.join(timeout=5)
