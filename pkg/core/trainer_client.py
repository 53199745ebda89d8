"""HTTP client of the remote trainer service (edge-cloud topology)."""

import json
import time
from typing import Any, Dict, Optional, Sequence, Tuple

import requests

from core.exceptions import SnapshotError, TaskNotFoundError, TrainingError, TransferError
from core.exemplars import ExemplarSet
from core.snapshot import ModelSnapshot
from utils.helper import sha256_bytes, to_serializable
from utils.logger import setup_logger

logger = setup_logger('trainer_client')

HASH_HEADER = 'X-Content-SHA256'
FINAL_STATES = ('done', 'failed')


class TrainerClient:
    def __init__(self, base_url: str, timeout_s: float = 30.0, session: Optional[requests.Session] = None,
                 fetch_attempts: int = 2):
        if not base_url:
            raise TrainingError("Trainer service URL is not configured")
        self.base_url = base_url.rstrip('/')
        self.timeout_s = timeout_s
        self.session = session or requests.Session()
        self.fetch_attempts = fetch_attempts

    def _url(self, path: str) -> str:
        return f"{self.base_url}{path}"

    def _request(self, method: str, path: str, **kwargs) -> requests.Response:
        try:
            return self.session.request(method, self._url(path), timeout=self.timeout_s, **kwargs)
        except requests.RequestException as e:
            raise TrainingError(f"Trainer service {self.base_url} unreachable: {e}") from e

    def _json(self, response: requests.Response) -> Dict[str, Any]:
        try:
            body = response.json()
        except ValueError as e:
            raise TrainingError(f"Trainer service {self.base_url} sent a non-JSON reply: {response.text[:200]!r}") from e
        if not isinstance(body, dict):
            raise TrainingError(f"Trainer service {self.base_url} sent {type(body).__name__}, expected an object")
        return body

    def health(self) -> Dict[str, Any]:
        response = self._request('GET', '/health')
        if response.status_code != 200:
            raise TrainingError(f"Trainer service unhealthy: HTTP {response.status_code}")
        return self._json(response)

    def submit(self, snapshot: ModelSnapshot, class_names: Sequence[str], config: Dict[str, Any], seed: int,
               exemplars: Optional[ExemplarSet] = None) -> str:
        request = {
            'class_names': list(class_names),
            'config': to_serializable(config),
            'seed': seed,
            'exemplars': exemplars.to_list() if exemplars is not None else None,
        }
        files = {'snapshot': ('base.snap', snapshot.to_bytes(), 'application/octet-stream')}
        response = self._request('POST', '/api/tasks', files=files, data={'request': json.dumps(request)})
        if response.status_code != 202:
            raise TrainingError(f"Task submission rejected: HTTP {response.status_code} {response.text[:200]}")
        task_id = self._json(response).get('task_id')
        if not task_id:
            raise TrainingError("Task submission reply carries no task_id")
        logger.info(f"Submitted learning task {task_id} for {list(class_names)}")
        return task_id

    def status(self, task_id: str) -> Dict[str, Any]:
        response = self._request('GET', f"/api/tasks/{task_id}")
        if response.status_code == 404:
            raise TaskNotFoundError(task_id)
        if response.status_code != 200:
            raise TrainingError(f"Status of task {task_id} failed: HTTP {response.status_code}")
        return self._json(response)

    def wait(self, task_id: str, poll_interval_s: float = 0.5, timeout_s: float = 3600.0) -> Dict[str, Any]:
        deadline = time.monotonic() + timeout_s
        last = None
        while True:
            status = self.status(task_id)
            if status['status'] != last:
                logger.info(f"Task {task_id}: {status['status']}")
                last = status['status']
            if status['status'] in FINAL_STATES:
                return status
            if time.monotonic() > deadline:
                raise TrainingError(f"Task {task_id} did not finish within {timeout_s}s")
            time.sleep(poll_interval_s)

    def download(self, task_id: str) -> Tuple[bytes, str]:
        """Raw snapshot bytes and the hash the service announced for them."""
        response = self._request('GET', f"/api/tasks/{task_id}/snapshot")
        if response.status_code == 404:
            raise TaskNotFoundError(task_id)
        if response.status_code == 409:
            raise TrainingError(f"Task {task_id} has no snapshot yet")
        if response.status_code != 200:
            raise TrainingError(f"Snapshot download for {task_id} failed: HTTP {response.status_code}")
        return response.content, response.headers.get(HASH_HEADER, '')

    def fetch_snapshot(self, task_id: str) -> ModelSnapshot:
        """Download and verify the snapshot; a hash mismatch is retried before giving up."""
        for attempt in range(1, self.fetch_attempts + 1):
            data, expected = self.download(task_id)
            actual = sha256_bytes(data)
            if expected and actual == expected:
                try:
                    return ModelSnapshot.from_bytes(data)
                except SnapshotError as e:
                    raise TransferError(f"Snapshot of task {task_id} verified but unreadable: {e}") from e
            logger.warning(f"Snapshot hash mismatch for task {task_id} (attempt {attempt}/{self.fetch_attempts}): "
                           f"expected {expected[:12] or 'none'}, got {actual[:12]}")
        raise TransferError(f"Snapshot of task {task_id} failed integrity verification")
