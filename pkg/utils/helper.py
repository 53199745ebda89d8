import hashlib
import json
import os
import random
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import numpy as np
import torch

PathLike = Union[str, Path]


def set_seed(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; return a torch generator bound to the seed"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def config_hash(config: Dict[str, Any]) -> str:
    """Short stable hash of a JSON-serializable config"""
    payload = json.dumps(to_serializable(config), sort_keys=True).encode('utf-8')
    return sha256_bytes(payload)[:12]


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write to a sibling temp file, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode('utf-8'))


def to_serializable(value: Any) -> Any:
    """Convert numpy/torch/path values into plain JSON types"""
    if isinstance(value, dict):
        return {str(k): to_serializable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_serializable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().tolist()
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, Path):
        return str(value)
    return value


def write_json(path: PathLike, payload: Any) -> Path:
    text = json.dumps(to_serializable(payload), indent=2) + '\n'
    return atomic_write_text(path, text)


def read_json(path: PathLike) -> Any:
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def write_jsonl(path: PathLike, records: Iterable[Dict[str, Any]]) -> Path:
    lines = [json.dumps(to_serializable(r), sort_keys=False) for r in records]
    return atomic_write_text(path, '\n'.join(lines) + ('\n' if lines else ''))


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; override wins, base is not mutated"""
    merged = dict(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged
