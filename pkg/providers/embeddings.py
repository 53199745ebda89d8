"""Word-vector label embeddings."""

import re
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from core.exceptions import ProviderError
from providers.base import EmbeddingProvider
from utils.logger import setup_logger

logger = setup_logger('embeddings')

_TOKEN = re.compile(r"[\s,_/]+")


def tokenize(label: str) -> List[str]:
    return [t for t in _TOKEN.split(label.strip().lower()) if t]


class WordVectorEmbedding(EmbeddingProvider):
    """Vectors read from a text file: one word per line followed by its components.

    A label embeds as the normalized mean of its known words; it is out of
    vocabulary only when none of its words are known.
    """

    name = 'word_vectors'

    def __init__(self, vectors: Dict[str, np.ndarray]):
        if not vectors:
            raise ProviderError("Word-vector table is empty")
        dims = {v.shape[0] for v in vectors.values()}
        if len(dims) != 1:
            raise ProviderError(f"Word vectors have inconsistent dimensions: {sorted(dims)}")
        self.vectors = {word.lower(): np.asarray(v, dtype=np.float64) for word, v in vectors.items()}
        self.dim = dims.pop()

    @classmethod
    def load(cls, path) -> 'WordVectorEmbedding':
        path = Path(path)
        if not path.exists():
            raise ProviderError(f"Word-vector file not found: {path}")
        vectors = {}
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, line in enumerate(f, start=1):
                parts = line.split()
                if not parts:
                    continue
                try:
                    vectors[parts[0]] = np.array([float(x) for x in parts[1:]], dtype=np.float64)
                except ValueError as e:
                    raise ProviderError(f"{path}:{line_no}: bad vector component: {e}") from e
        logger.info(f"Loaded {len(vectors)} word vectors from {path}")
        return cls(vectors)

    def embed(self, label: str) -> Optional[np.ndarray]:
        known = [self.vectors[t] for t in tokenize(label) if t in self.vectors]
        if not known:
            return None
        mean = np.mean(known, axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            return None
        return mean / norm

    def describe(self) -> dict:
        return {'type': self.name, 'words': len(self.vectors), 'dim': self.dim}
