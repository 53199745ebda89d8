"""Trainer service for the edge-cloud topology.

Endpoints:
    GET  /health
    POST /api/tasks                  multipart: snapshot (bytes), request (JSON)
    GET  /api/tasks/<id>
    GET  /api/tasks/<id>/snapshot    octet-stream, X-Content-SHA256 header

Result snapshots live in <work_dir>/<task_id>/model.snap; only the newest
`service.retain_finished_tasks` finished tasks are kept.
"""

import json
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from flask import Flask, Response, jsonify, request

from config.settings import default_settings, load_config
from core.exceptions import IncrementalDetectionError, SnapshotError, TaskNotFoundError
from core.exemplars import ExemplarSet
from core.pipeline import LearningTaskRunner
from core.snapshot import ModelSnapshot
from core.trainer_client import HASH_HEADER
from utils.helper import atomic_write_bytes, deep_merge, sha256_bytes, write_json
from utils.logger import setup_logger

logger = setup_logger('trainer_service')

STATES = ('queued', 'building', 'training', 'done', 'failed')
FINAL_STATES = ('done', 'failed')
SNAPSHOT_FILE = 'model.snap'


@dataclass
class TaskRecord:
    task_id: str
    class_names: List[str]
    seed: int
    config: Dict[str, Any]
    base_snapshot: Optional[bytes]      # released once the worker has loaded it
    exemplars: Optional[list] = None
    status: str = 'queued'
    timings: Dict[str, float] = field(default_factory=dict)
    total_s: float = 0.0
    error: Optional[str] = None
    build_reports: List[Dict[str, Any]] = field(default_factory=list)
    snapshot_path: Optional[Path] = None
    snapshot_hash: Optional[str] = None
    created: float = field(default_factory=time.time)
    finished: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'task_id': self.task_id,
            'class_names': self.class_names,
            'status': self.status,
            'timings': self.timings,
            'total_s': self.total_s,
            'error': self.error,
            'build_reports': self.build_reports,
            'snapshot_hash': self.snapshot_hash,
        }


class TaskStore:
    def __init__(self, retain_finished: int = 32):
        self.tasks: Dict[str, TaskRecord] = {}
        self.retain_finished = retain_finished
        self._lock = threading.Lock()

    def add(self, record: TaskRecord):
        with self._lock:
            self.tasks[record.task_id] = record

    def get(self, task_id: str) -> TaskRecord:
        with self._lock:
            if task_id not in self.tasks:
                raise TaskNotFoundError(task_id)
            return self.tasks[task_id]

    def update(self, task_id: str, **changes):
        with self._lock:
            record = self.tasks[task_id]
            for key, value in changes.items():
                setattr(record, key, value)
            if record.status in FINAL_STATES and record.finished is None:
                record.finished = time.time()
                for old in self._evict():
                    self._discard(old)

    def _evict(self) -> List[TaskRecord]:
        finished = sorted((r for r in self.tasks.values() if r.finished is not None), key=lambda r: r.finished)
        evicted = finished[:max(0, len(finished) - self.retain_finished)]
        for record in evicted:
            del self.tasks[record.task_id]
        return evicted

    @staticmethod
    def _discard(record: TaskRecord):
        if record.snapshot_path is not None:
            record.snapshot_path.unlink(missing_ok=True)
        logger.info(f"Evicted finished task {record.task_id}")

    def counts(self) -> Dict[str, int]:
        with self._lock:
            result = {state: 0 for state in STATES}
            for record in self.tasks.values():
                result[record.status] += 1
            return result


class TrainingWorker:
    """Single background thread draining the task queue, one learning task at a time."""

    def __init__(self, store: TaskStore, settings: Dict[str, Any], work_dir: Path,
                 runner: Optional[LearningTaskRunner] = None):
        self.store = store
        self.settings = settings
        self.runner = runner or LearningTaskRunner()
        self.work_dir = Path(work_dir)
        self.queue: 'queue.Queue[str]' = queue.Queue()
        self.thread = threading.Thread(target=self._loop, name='trainer-worker', daemon=True)
        self.thread.start()

    def submit(self, task_id: str):
        self.queue.put(task_id)

    def task_settings(self, record: TaskRecord) -> Dict[str, Any]:
        # Providers come from the service's own configuration
        merged = deep_merge(self.settings, record.config)
        merged['providers'] = self.settings['providers']
        return merged

    def _loop(self):
        while True:
            task_id = self.queue.get()
            try:
                self.process(task_id)
            finally:
                self.queue.task_done()

    def process(self, task_id: str):
        record = self.store.get(task_id)
        task_dir = self.work_dir / task_id
        task_dir.mkdir(parents=True, exist_ok=True)
        started = time.perf_counter()
        try:
            base = ModelSnapshot.from_bytes(record.base_snapshot)
            exemplars = ExemplarSet.from_list(record.exemplars) if record.exemplars else None
            self.store.update(task_id, base_snapshot=None, exemplars=None)
            result = self.runner.execute(
                base, record.class_names, self.task_settings(record), record.seed, exemplars,
                stage_callback=lambda stage: self.store.update(task_id, status=stage),
                task_dir=task_dir,
            )
            data = result.snapshot.to_bytes()
            path = atomic_write_bytes(task_dir / SNAPSHOT_FILE, data)
            self.store.update(
                task_id,
                status='done',
                timings=result.timings,
                total_s=time.perf_counter() - started,
                build_reports=[r.to_dict() for r in result.build_reports],
                snapshot_path=path,
                snapshot_hash=sha256_bytes(data),
            )
            logger.info(f"Task {task_id} done in {time.perf_counter() - started:.2f}s")
        except IncrementalDetectionError as e:
            logger.error(f"Task {task_id} failed: {e}")
            self.store.update(task_id, status='failed', error=str(e), total_s=time.perf_counter() - started,
                              base_snapshot=None)
        except Exception as e:
            logger.exception(f"Task {task_id} crashed")
            self.store.update(task_id, status='failed', error=f"{type(e).__name__}: {e}", base_snapshot=None)
        write_json(task_dir / 'status.json', record.to_dict())


def create_app(settings: Optional[Dict[str, Any]] = None, config_path: Optional[str] = None,
               runner: Optional[LearningTaskRunner] = None, work_dir: Optional[str] = None) -> Flask:
    if settings is None:
        settings = load_config(config_path) if config_path else default_settings()
    work_dir = Path(work_dir) if work_dir else Path(settings['pipeline']['work_dir']) / 'trainer_service'
    app = Flask(__name__)
    store = TaskStore(settings['service']['retain_finished_tasks'])
    worker = TrainingWorker(store, settings, work_dir, runner)
    app.extensions['task_store'] = store
    app.extensions['trainer_worker'] = worker

    @app.errorhandler(TaskNotFoundError)
    def not_found(e):
        return jsonify({'error': f"Unknown task {e.args[0]}"}), 404

    @app.route('/health')
    def health():
        return jsonify({'status': 'ok', 'service': 'trainer', 'tasks': store.counts()})

    @app.route('/api/tasks', methods=['POST'])
    def submit_task():
        upload = request.files.get('snapshot')
        if upload is None or 'request' not in request.form:
            return jsonify({'error': "multipart fields 'snapshot' and 'request' are required"}), 400
        try:
            payload = json.loads(request.form['request'])
            class_names = [str(c) for c in payload['class_names']]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            return jsonify({'error': f"Malformed request: {e}"}), 400
        data = upload.read()
        try:
            ModelSnapshot.from_bytes(data)
        except SnapshotError as e:
            return jsonify({'error': f"Invalid base snapshot: {e}"}), 400
        record = TaskRecord(
            task_id=uuid.uuid4().hex[:12],
            class_names=class_names,
            seed=int(payload.get('seed', 0)),
            config=payload.get('config') or {},
            base_snapshot=data,
            exemplars=payload.get('exemplars'),
        )
        store.add(record)
        worker.submit(record.task_id)
        logger.info(f"Queued task {record.task_id} for {class_names}")
        return jsonify({'task_id': record.task_id}), 202

    @app.route('/api/tasks/<task_id>')
    def task_status(task_id):
        return jsonify(store.get(task_id).to_dict())

    @app.route('/api/tasks/<task_id>/snapshot')
    def task_snapshot(task_id):
        record = store.get(task_id)
        if record.status != 'done' or record.snapshot_path is None:
            return jsonify({'error': f"Task {task_id} is {record.status}"}), 409
        try:
            data = record.snapshot_path.read_bytes()
        except FileNotFoundError:
            raise TaskNotFoundError(task_id)
        return Response(data, mimetype='application/octet-stream', headers={HASH_HEADER: record.snapshot_hash})

    return app
