"""Content-addressed snapshot registry with an atomically swapped `current` pointer.

Layout:
    <root>/snapshots/<sha256>.snap
    <root>/current               active hash, replaced with os.replace
    <root>/tasks/<task_id>/      per-task artifacts (manifests, logs, reports)
    <root>/task.lock             held by the learning task that owns the registry
"""

import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional, Union

import torch
from filelock import FileLock, Timeout

from core.detector import DetectorModel
from core.exceptions import SnapshotError, TrainingError
from core.images import blank_image
from core.snapshot import ModelSnapshot
from utils.helper import atomic_write_text, sha256_file
from utils.logger import setup_logger

logger = setup_logger('registry')


class ModelRegistry:
    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.snapshot_dir = self.root / 'snapshots'
        self.tasks_root = self.root / 'tasks'
        self.pointer = self.root / 'current'
        self.snapshot_dir.mkdir(parents=True, exist_ok=True)
        self.tasks_root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._task_lock = threading.Lock()
        self._file_lock = FileLock(str(self.root / 'task.lock'))
        self._active: Optional[DetectorModel] = None
        self._active_hash: Optional[str] = None

    def snapshot_path(self, content_hash: str) -> Path:
        return self.snapshot_dir / f"{content_hash}.snap"

    def list_snapshots(self) -> List[str]:
        return sorted(p.stem for p in self.snapshot_dir.glob('*.snap'))

    def publish(self, snapshot: ModelSnapshot) -> str:
        """Store the snapshot under its content hash; publishing twice is a no-op."""
        content_hash = snapshot.content_hash()
        path = self.snapshot_path(content_hash)
        if not path.exists():
            snapshot.save(path)
            logger.info(f"Published snapshot {content_hash[:12]} ({snapshot.num_classes} classes)")
        return content_hash

    def load(self, content_hash: str) -> ModelSnapshot:
        path = self.snapshot_path(content_hash)
        if not path.exists():
            raise SnapshotError(f"Snapshot {content_hash} is not in the registry")
        actual = sha256_file(path)
        if actual != content_hash:
            raise SnapshotError(f"Snapshot file {path} is corrupt: content hash {actual}")
        return ModelSnapshot.load(path)

    def validate(self, content_hash: str) -> DetectorModel:
        """Load the snapshot and run a smoke inference on a blank image; outputs must be finite."""
        model = self.load(content_hash).to_model().freeze()
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            raw = model(blank_image(model.config.image_size).unsqueeze(0).to(dtype))
        if not (torch.isfinite(raw.flat_logits()).all() and torch.isfinite(raw.flat_offsets()).all()):
            raise SnapshotError(f"Snapshot {content_hash[:12]} produces non-finite outputs")
        return model

    def activate(self, content_hash: str) -> DetectorModel:
        """Validate, then point `current` at the snapshot and swap the served model."""
        model = self.validate(content_hash)
        with self._lock:
            atomic_write_text(self.pointer, content_hash + '\n')
            self._active = model
            self._active_hash = content_hash
        logger.info(f"Activated snapshot {content_hash[:12]}")
        return model

    def current_hash(self) -> Optional[str]:
        if not self.pointer.exists():
            return None
        value = self.pointer.read_text(encoding='utf-8').strip()
        return value or None

    def current_snapshot(self) -> Optional[ModelSnapshot]:
        content_hash = self.current_hash()
        return self.load(content_hash) if content_hash else None

    def active_model(self) -> Optional[DetectorModel]:
        """Frozen model of the current snapshot, cached until the next activation."""
        content_hash = self.current_hash()
        if content_hash is None:
            return None
        with self._lock:
            if self._active is not None and self._active_hash == content_hash:
                return self._active
        model = self.validate(content_hash)
        with self._lock:
            self._active, self._active_hash = model, content_hash
        return model

    def task_dir(self, task_id: str) -> Path:
        path = self.tasks_root / task_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    @contextmanager
    def task_lock(self, timeout_s: float = -1) -> Iterator[None]:
        """Exclusive ownership of the registry from reading `current` to the swap.

        Serializes learning tasks across threads and processes; a negative
        timeout waits forever.
        """
        timeout_s = timeout_s if timeout_s >= 0 else -1
        if not self._task_lock.acquire(timeout=timeout_s):
            raise TrainingError(f"Registry {self.root} is busy with another learning task")
        try:
            try:
                self._file_lock.acquire(timeout=timeout_s)
            except Timeout as e:
                raise TrainingError(f"Registry {self.root} is locked by another process") from e
            try:
                yield
            finally:
                self._file_lock.release()
        finally:
            self._task_lock.release()
