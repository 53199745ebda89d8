import io
import json
import threading
import time

import pytest
from flask import Flask

from core.exceptions import TaskNotFoundError, TrainingError, TransferError
from core.trainer_client import HASH_HEADER, TrainerClient
from service.app import create_app
from utils.helper import sha256_bytes


def _wait_for(client, task_id, states=('done', 'failed'), timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        status = client.get(f"/api/tasks/{task_id}").get_json()
        if status['status'] in states:
            return status
        time.sleep(0.02)
    raise AssertionError(f"task {task_id} stuck in {status['status']}")


def _submit(client, snapshot_bytes, class_names=('cross',), seed=3):
    payload = {'class_names': list(class_names), 'seed': seed, 'config': {}}
    return client.post('/api/tasks', data={
        'snapshot': (io.BytesIO(snapshot_bytes), 'base.snap'),
        'request': json.dumps(payload),
    }, content_type='multipart/form-data')


@pytest.fixture
def gate():
    event = threading.Event()
    yield event
    event.set()


class TestRoutes:
    def test_health(self, settings, stub_runner_cls, tiny_snapshot):
        app = create_app(settings, runner=stub_runner_cls(tiny_snapshot))
        body = app.test_client().get('/health').get_json()
        assert body['status'] == 'ok'
        assert body['tasks']['done'] == 0

    def test_missing_fields(self, settings, stub_runner_cls, tiny_snapshot):
        client = create_app(settings, runner=stub_runner_cls(tiny_snapshot)).test_client()
        assert client.post('/api/tasks', data={}).status_code == 400
        response = client.post('/api/tasks', data={
            'snapshot': (io.BytesIO(tiny_snapshot.to_bytes()), 'base.snap'),
            'request': '{"seed": 1}',
        }, content_type='multipart/form-data')
        assert response.status_code == 400

    def test_invalid_snapshot(self, settings, stub_runner_cls, tiny_snapshot):
        client = create_app(settings, runner=stub_runner_cls(tiny_snapshot)).test_client()
        response = _submit(client, b'not a snapshot')
        assert response.status_code == 400
        assert 'snapshot' in response.get_json()['error']

    def test_completed_task(self, settings, stub_runner_cls, tiny_snapshot, tmp_path):
        runner = stub_runner_cls(tiny_snapshot)
        client = create_app(settings, runner=runner, work_dir=str(tmp_path)).test_client()
        response = _submit(client, tiny_snapshot.to_bytes())
        assert response.status_code == 202
        task_id = response.get_json()['task_id']
        status = _wait_for(client, task_id)
        assert status['status'] == 'done'
        assert status['timings']['train_model_s'] == pytest.approx(0.03)
        assert runner.calls == [{'class_names': ['cross'], 'seed': 3, 'exemplars': None}]

        download = client.get(f"/api/tasks/{task_id}/snapshot")
        assert download.status_code == 200
        assert download.headers[HASH_HEADER] == sha256_bytes(download.data)
        assert download.data == tiny_snapshot.to_bytes()
        assert json.loads((tmp_path / task_id / 'status.json').read_text())['status'] == 'done'

    def test_unknown_task(self, settings, stub_runner_cls, tiny_snapshot):
        client = create_app(settings, runner=stub_runner_cls(tiny_snapshot)).test_client()
        assert client.get('/api/tasks/nope').status_code == 404
        assert client.get('/api/tasks/nope/snapshot').status_code == 404

    def test_snapshot_not_ready(self, settings, stub_runner_cls, tiny_snapshot, gate):
        client = create_app(settings, runner=stub_runner_cls(tiny_snapshot, gate=gate)).test_client()
        task_id = _submit(client, tiny_snapshot.to_bytes()).get_json()['task_id']
        _wait_for(client, task_id, states=('building',))
        assert client.get(f"/api/tasks/{task_id}/snapshot").status_code == 409
        gate.set()
        assert _wait_for(client, task_id)['status'] == 'done'

    def test_failed_task(self, settings, stub_runner_cls, tiny_snapshot):
        runner = stub_runner_cls(tiny_snapshot, error="no images retained for 'cross'")
        client = create_app(settings, runner=runner).test_client()
        task_id = _submit(client, tiny_snapshot.to_bytes()).get_json()['task_id']
        status = _wait_for(client, task_id)
        assert status['status'] == 'failed'
        assert 'cross' in status['error']
        assert client.get(f"/api/tasks/{task_id}/snapshot").status_code == 409

    def test_base_snapshot_is_released(self, settings, stub_runner_cls, tiny_snapshot, tmp_path):
        app = create_app(settings, runner=stub_runner_cls(tiny_snapshot), work_dir=str(tmp_path))
        client = app.test_client()
        task_id = _submit(client, tiny_snapshot.to_bytes()).get_json()['task_id']
        assert _wait_for(client, task_id)['status'] == 'done'
        record = app.extensions['task_store'].get(task_id)
        assert record.base_snapshot is None
        assert record.snapshot_path == tmp_path / task_id / 'model.snap'
        assert sha256_bytes(record.snapshot_path.read_bytes()) == record.snapshot_hash

    def test_finished_tasks_are_evicted(self, settings, stub_runner_cls, tiny_snapshot, tmp_path):
        settings['service']['retain_finished_tasks'] = 1
        client = create_app(settings, runner=stub_runner_cls(tiny_snapshot), work_dir=str(tmp_path)).test_client()
        first = _submit(client, tiny_snapshot.to_bytes()).get_json()['task_id']
        _wait_for(client, first)
        second = _submit(client, tiny_snapshot.to_bytes()).get_json()['task_id']
        _wait_for(client, second)
        assert client.get(f"/api/tasks/{first}").status_code == 404
        assert not (tmp_path / first / 'model.snap').exists()
        assert client.get(f"/api/tasks/{second}/snapshot").data == tiny_snapshot.to_bytes()
        assert client.get('/health').get_json()['tasks']['done'] == 1


class TestClient:
    def test_round_trip(self, settings, stub_runner_cls, tiny_snapshot, serve_app):
        url = serve_app(create_app(settings, runner=stub_runner_cls(tiny_snapshot)))
        client = TrainerClient(url, timeout_s=5)
        assert client.health()['service'] == 'trainer'
        task_id = client.submit(tiny_snapshot, ['cross'], {'distill': {'epochs': 1}}, seed=0)
        assert client.wait(task_id, poll_interval_s=0.02, timeout_s=10)['status'] == 'done'
        assert client.fetch_snapshot(task_id) == tiny_snapshot

    def test_unknown_task(self, settings, stub_runner_cls, tiny_snapshot, serve_app):
        client = TrainerClient(serve_app(create_app(settings, runner=stub_runner_cls(tiny_snapshot))))
        with pytest.raises(TaskNotFoundError):
            client.status('missing')

    def test_corrupted_transfer_is_detected(self, settings, stub_runner_cls, tiny_snapshot, serve_app,
                                            monkeypatch):
        client = TrainerClient(serve_app(create_app(settings, runner=stub_runner_cls(tiny_snapshot))))
        task_id = client.submit(tiny_snapshot, ['cross'], {}, seed=0)
        client.wait(task_id, poll_interval_s=0.02, timeout_s=10)
        real_download = TrainerClient.download
        attempts = []

        def flipped(self, tid):
            data, expected = real_download(self, tid)
            attempts.append(tid)
            return bytes([data[0] ^ 0x01]) + data[1:], expected

        monkeypatch.setattr(TrainerClient, 'download', flipped)
        with pytest.raises(TransferError):
            client.fetch_snapshot(task_id)
        assert len(attempts) == client.fetch_attempts == 2

    def test_retry_recovers_from_one_bad_transfer(self, settings, stub_runner_cls, tiny_snapshot, serve_app,
                                                  monkeypatch):
        client = TrainerClient(serve_app(create_app(settings, runner=stub_runner_cls(tiny_snapshot))))
        task_id = client.submit(tiny_snapshot, ['cross'], {}, seed=0)
        client.wait(task_id, poll_interval_s=0.02, timeout_s=10)
        real_download = TrainerClient.download
        calls = []

        def flaky(self, tid):
            data, expected = real_download(self, tid)
            calls.append(tid)
            if len(calls) == 1:
                data = data[:-1] + bytes([data[-1] ^ 0xFF])
            return data, expected

        monkeypatch.setattr(TrainerClient, 'download', flaky)
        assert client.fetch_snapshot(task_id) == tiny_snapshot
        assert len(calls) == 2

    def test_unreachable_service(self):
        client = TrainerClient('http://127.0.0.1:9', timeout_s=0.5)
        with pytest.raises(TrainingError):
            client.health()

    def test_missing_url(self):
        with pytest.raises(TrainingError):
            TrainerClient('')

    def test_non_json_reply(self, serve_app):
        proxy = Flask('proxy')

        @proxy.route('/health')
        def health():
            return '<html>bad gateway</html>'

        client = TrainerClient(serve_app(proxy), timeout_s=5)
        with pytest.raises(TrainingError, match='non-JSON'):
            client.health()
