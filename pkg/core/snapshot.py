"""Versioned, self-describing model snapshot container.

Layout::

    b'IODSNAP' + version byte
    uint64 little-endian header length
    UTF-8 JSON header (sorted keys):
        {format_version, detector_config, class_names, class_blocks,
         arrays: [{name, dtype, shape, offset, nbytes}, ...]}
    raw little-endian array bytes, in header order

Identical parameters always serialize to identical bytes.
"""

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import torch

from core.detector import DetectorConfig, DetectorModel
from core.exceptions import SnapshotError
from utils.helper import atomic_write_bytes, sha256_bytes
from utils.logger import setup_logger

logger = setup_logger('snapshot')

MAGIC = b'IODSNAP'
FORMAT_VERSION = 1
_LENGTH = struct.Struct('<Q')


class ModelSnapshot:
    """Immutable value holding everything needed to rebuild a DetectorModel."""

    def __init__(self, detector_config: Dict[str, Any], class_names: List[str], class_blocks: List[int],
                 arrays: 'OrderedDict[str, np.ndarray]'):
        self.detector_config = detector_config
        self.class_names = list(class_names)
        self.class_blocks = list(class_blocks)
        self.arrays = OrderedDict()
        for name, array in arrays.items():
            frozen = np.array(array, copy=True)
            frozen.setflags(write=False)
            self.arrays[name] = frozen
        self._bytes: Optional[bytes] = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @classmethod
    def from_model(cls, model: DetectorModel) -> 'ModelSnapshot':
        arrays = OrderedDict()
        for name, tensor in model.state_dict().items():
            arrays[name] = tensor.detach().cpu().numpy()
        return cls(model.config.to_dict(), model.class_names, model.class_subnet.block_sizes, arrays)

    def to_model(self) -> DetectorModel:
        model = DetectorModel(DetectorConfig.from_dict(self.detector_config), self.class_names, self.class_blocks)
        first = next(iter(self.arrays.values()))
        model.to(torch.from_numpy(np.array(first)).dtype)
        state = OrderedDict((name, torch.from_numpy(np.array(a))) for name, a in self.arrays.items())
        try:
            model.load_state_dict(state, strict=True)
        except RuntimeError as e:
            raise SnapshotError(f"Snapshot arrays do not fit the detector: {e}") from e
        return model

    def to_bytes(self) -> bytes:
        if self._bytes is not None:
            return self._bytes
        entries = []
        chunks = []
        offset = 0
        for name, array in self.arrays.items():
            data = np.ascontiguousarray(array.astype(array.dtype.newbyteorder('<'), copy=False)).tobytes()
            entries.append({
                'name': name,
                'dtype': array.dtype.newbyteorder('<').str,
                'shape': list(array.shape),
                'offset': offset,
                'nbytes': len(data),
            })
            chunks.append(data)
            offset += len(data)
        header = {
            'format_version': FORMAT_VERSION,
            'detector_config': self.detector_config,
            'class_names': self.class_names,
            'class_blocks': self.class_blocks,
            'arrays': entries,
        }
        header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
        self._bytes = MAGIC + bytes([FORMAT_VERSION]) + _LENGTH.pack(len(header_bytes)) + header_bytes + b''.join(chunks)
        return self._bytes

    @classmethod
    def from_bytes(cls, data: bytes) -> 'ModelSnapshot':
        prefix = len(MAGIC) + 1 + _LENGTH.size
        if len(data) < prefix or data[:len(MAGIC)] != MAGIC:
            raise SnapshotError("Not a model snapshot (bad magic)")
        version = data[len(MAGIC)]
        if version != FORMAT_VERSION:
            raise SnapshotError(f"Unsupported snapshot format version {version}")
        (header_len,) = _LENGTH.unpack_from(data, len(MAGIC) + 1)
        body_start = prefix + header_len
        if len(data) < body_start:
            raise SnapshotError("Snapshot header is truncated")
        try:
            header = json.loads(data[prefix:body_start].decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise SnapshotError(f"Snapshot header is corrupt: {e}") from e

        arrays = OrderedDict()
        body = memoryview(data)[body_start:]
        try:
            for entry in header['arrays']:
                start, size = int(entry['offset']), int(entry['nbytes'])
                if start + size > len(body):
                    raise SnapshotError(f"Snapshot array {entry['name']} is truncated")
                array = np.frombuffer(body[start:start + size], dtype=np.dtype(entry['dtype']))
                arrays[entry['name']] = array.reshape(entry['shape'])
            snapshot = cls(header['detector_config'], header['class_names'], header['class_blocks'], arrays)
        except (KeyError, TypeError, ValueError) as e:
            raise SnapshotError(f"Snapshot header is malformed: {e}") from e
        expected = sum(int(e['nbytes']) for e in header['arrays'])
        if expected != len(body):
            raise SnapshotError(f"Snapshot body has {len(body)} bytes, header describes {expected}")
        return snapshot

    def content_hash(self) -> str:
        return sha256_bytes(self.to_bytes())

    def save(self, path: Union[str, Path]) -> Path:
        path = atomic_write_bytes(path, self.to_bytes())
        logger.debug(f"Saved snapshot {self.content_hash()[:12]} to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'ModelSnapshot':
        path = Path(path)
        if not path.exists():
            raise SnapshotError(f"Snapshot file not found: {path}")
        return cls.from_bytes(path.read_bytes())

    def __eq__(self, other):
        return isinstance(other, ModelSnapshot) and self.to_bytes() == other.to_bytes()

    def __hash__(self):
        return hash(self.content_hash())

    def __repr__(self):
        return f"ModelSnapshot(classes={self.class_names}, sha256={self.content_hash()[:12]})"


def parameter_hash(model: DetectorModel) -> str:
    return ModelSnapshot.from_model(model).content_hash()
