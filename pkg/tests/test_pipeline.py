import json
import threading
import time

import pytest

from core.detector import expand_class_head
from core.exceptions import ConfigError, DatasetError, TrainingError, TransferError
from core.manifest import DatasetManifest
from core.pipeline import PipelineConfig, TaskResult, TimingReport, run_learning_task
from core.registry import ModelRegistry
from core.snapshot import ModelSnapshot
from core.trainer import TrainingLog
from core.trainer_client import TrainerClient
from service.app import create_app

from tests.conftest import BASE_CLASSES, NEW_CLASS


@pytest.fixture
def registry(settings, base_snapshot):
    registry = ModelRegistry(settings['pipeline']['registry_dir'])
    registry.activate(registry.publish(base_snapshot))
    return registry


class TestTimingReport:
    def test_edge_only_has_no_transfer(self):
        report = TimingReport('edge_only', 1.0, 2.0, 3.0, total_s=6.5)
        assert report.stage_sum() == 6.0
        text = report.format_table()
        assert text.splitlines()[0] == 'System running time (edge_only)'
        assert 'N/A' in text
        assert 'Download image' in text and 'Download model' in text

    def test_frame(self):
        frame = TimingReport('edge_cloud', 1.0, 2.0, 3.0, 0.5, 6.6).to_frame()
        assert frame['stage'].tolist() == ['Download image', 'Build dataset', 'Train model', 'Download model',
                                           'Total']
        assert frame['seconds'].iloc[-1] == 6.6


def test_edge_cloud_needs_url(settings):
    settings['pipeline']['mode'] = 'edge_cloud'
    settings['pipeline']['trainer_url'] = None
    with pytest.raises(ConfigError):
        PipelineConfig.from_settings(settings)


def test_unapproved_task(settings, registry):
    before = registry.current_hash()
    with pytest.raises(TrainingError):
        run_learning_task([NEW_CLASS], settings, registry, approve=lambda names: False)
    assert registry.current_hash() == before
    assert list(registry.tasks_root.glob('*/request.json')) == []


def test_no_base_model(settings):
    with pytest.raises(TrainingError):
        run_learning_task([NEW_CLASS], settings, approve=True)


def test_known_class_is_rejected(settings, registry):
    with pytest.raises(TrainingError):
        run_learning_task(['circle'], settings, registry, approve=True)


def test_edge_only_learning(settings, registry, base_snapshot, shapes_corpus):
    settings['pipeline']['eval_manifest'] = str(shapes_corpus.root / 'test.json')
    asked = []
    outcome = run_learning_task([NEW_CLASS], settings, registry, approve=lambda names: asked.append(names) or True,
                                seed=0)
    assert asked == [[NEW_CLASS]]
    assert outcome.previous_hash == base_snapshot.content_hash()
    assert registry.current_hash() == outcome.snapshot_hash
    assert registry.active_model().class_names == BASE_CLASSES + [NEW_CLASS]

    timing = outcome.timing
    assert timing.transfer_model_s is None
    assert timing.stage_sum() == pytest.approx(timing.total_s, rel=0.05, abs=0.05)
    assert 'N/A' in timing.format_table()

    assert outcome.eval_report is not None
    assert set(outcome.eval_report.per_class_ap) == set(BASE_CLASSES + [NEW_CLASS])
    assert outcome.eval_report.new_classes == [NEW_CLASS]

    task_dir = registry.task_dir(outcome.task_id)
    assert json.loads((task_dir / 'request.json').read_text())['class_names'] == [NEW_CLASS]
    assert json.loads((task_dir / 'outcome.json').read_text())['snapshot_hash'] == outcome.snapshot_hash
    assert (task_dir / 'manifest.json').exists()
    assert (task_dir / 'training_log.jsonl').exists()


def test_edge_cloud_matches_edge_only(settings, registry, serve_app, tmp_path):
    local = run_learning_task([NEW_CLASS], settings, registry, approve=True, seed=0)
    registry.activate(local.previous_hash)

    url = serve_app(create_app(settings, work_dir=str(tmp_path / 'service')))
    settings['pipeline'].update(mode='edge_cloud', trainer_url=url)
    remote = run_learning_task([NEW_CLASS], settings, registry, approve=True, seed=0)
    assert remote.snapshot_hash == local.snapshot_hash
    assert remote.timing.transfer_model_s is not None
    assert remote.timing.total_s >= remote.timing.transfer_model_s
    assert 'Download model' in remote.timing.format_table()
    assert remote.build_reports[0]['query'] == NEW_CLASS


def test_failed_dataset_keeps_previous_model(settings, registry, base_snapshot):
    settings['providers']['proposals']['max_boxes'] = 0
    before = registry.current_hash()
    with pytest.raises(DatasetError):
        run_learning_task([NEW_CLASS], settings, registry, approve=True)
    assert registry.current_hash() == before
    assert registry.active_model().class_names == BASE_CLASSES

    errors = list(registry.tasks_root.glob('*/error.json'))
    assert len(errors) == 1
    assert json.loads(errors[0].read_text())['type'] == 'DatasetError'


def test_corrupted_transfer_keeps_previous_model(settings, registry, serve_app, stub_runner_cls, base_snapshot,
                                                 tmp_path, monkeypatch):
    url = serve_app(create_app(settings, runner=stub_runner_cls(base_snapshot), work_dir=str(tmp_path / 'svc')))
    settings['pipeline'].update(mode='edge_cloud', trainer_url=url)
    real_download = TrainerClient.download

    def flipped(self, task_id):
        data, expected = real_download(self, task_id)
        return data[:100] + bytes([data[100] ^ 0x01]) + data[101:], expected

    monkeypatch.setattr(TrainerClient, 'download', flipped)
    before = registry.current_hash()
    with pytest.raises(TransferError):
        run_learning_task([NEW_CLASS], settings, registry, approve=True)
    assert registry.current_hash() == before


def test_remote_failure_is_reported(settings, registry, serve_app, stub_runner_cls, base_snapshot):
    runner = stub_runner_cls(base_snapshot, error='nothing retained')
    settings['pipeline'].update(mode='edge_cloud', trainer_url=serve_app(create_app(settings, runner=runner)))
    with pytest.raises(TrainingError, match='nothing retained'):
        run_learning_task([NEW_CLASS], settings, registry, approve=True)


class ExpandingRunner:
    """Appends the requested classes to whatever base model it is handed."""

    def __init__(self, delay_s=0.2):
        self.delay_s = delay_s
        self.bases = []

    def execute(self, base_snapshot, class_names, settings, seed=0, exemplars=None, stage_callback=None,
                task_dir=None):
        self.bases.append(list(base_snapshot.class_names))
        time.sleep(self.delay_s)
        model = expand_class_head(base_snapshot.to_model(), len(class_names), class_names, seed=seed)
        timings = {'download_images_s': 0.0, 'build_dataset_s': 0.0, 'train_model_s': self.delay_s}
        return TaskResult(ModelSnapshot.from_model(model), DatasetManifest(list(class_names)), [], TrainingLog(),
                          timings)


def test_concurrent_tasks_do_not_lose_classes(settings, registry, base_snapshot):
    runner = ExpandingRunner()
    outcomes, errors = [], []

    def learn(name):
        try:
            outcomes.append(run_learning_task([name], settings, registry, approve=True, runner=runner))
        except Exception as e:
            errors.append(e)

    threads = [threading.Thread(target=learn, args=(name,)) for name in (NEW_CLASS, 'ring')]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join(timeout=60)

    assert errors == []
    assert sorted(registry.active_model().class_names[len(BASE_CLASSES):]) == sorted([NEW_CLASS, 'ring'])
    assert runner.bases[0] == BASE_CLASSES
    assert len(runner.bases[1]) == len(BASE_CLASSES) + 1
    by_previous = {o.previous_hash: o for o in outcomes}
    first = by_previous[base_snapshot.content_hash()]
    second = by_previous[first.snapshot_hash]
    assert registry.current_hash() == second.snapshot_hash


def test_registry_lock_is_shared_between_instances(settings, registry):
    other = ModelRegistry(settings['pipeline']['registry_dir'])
    with registry.task_lock():
        with pytest.raises(TrainingError, match='locked'):
            with other.task_lock(timeout_s=0.1):
                pass
    with other.task_lock(timeout_s=0.1):
        pass
