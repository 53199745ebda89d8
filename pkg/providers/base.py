"""Provider interfaces for automatic dataset construction.

Every family is swappable: tests plug in scripted fixtures, desk-scale runs
use the local corpus and the small patch classifier, and a deployment can
point the image source at an HTTP search endpoint.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from core.geometry import Box, ScoredBox
from core.manifest import LabelScore


@dataclass(frozen=True)
class SourceImage:
    path: str
    width: int
    height: int
    query: str = ''


class ImageSource(ABC):
    """Returns candidate images for a class-name query."""

    name = 'image_source'

    @abstractmethod
    def fetch(self, query: str, limit: int) -> List[SourceImage]:
        ...

    def describe(self) -> dict:
        return {'type': self.name}


class ProposalProvider(ABC):
    """Class-agnostic noisy box proposals for one image."""

    name = 'proposals'

    @abstractmethod
    def propose(self, image: Image.Image, source: SourceImage) -> List[ScoredBox]:
        ...

    def describe(self) -> dict:
        return {'type': self.name}


class ClassifierProvider(ABC):
    """Top-k label predictions for an image region."""

    name = 'classifier'

    @property
    @abstractmethod
    def vocabulary(self) -> List[str]:
        ...

    @abstractmethod
    def classify(self, image: Image.Image, box: Box, k: int, source: Optional[SourceImage] = None) -> List[LabelScore]:
        """Labels sorted by descending score, at most k of them."""

    def classify_many(self, image: Image.Image, boxes: Sequence[Box], k: int,
                      source: Optional[SourceImage] = None) -> List[List[LabelScore]]:
        return [self.classify(image, box, k, source) for box in boxes]

    def describe(self) -> dict:
        return {'type': self.name}


class EmbeddingProvider(ABC):
    """Word embeddings used to compare label semantics."""

    name = 'embedding'

    @abstractmethod
    def embed(self, label: str) -> Optional[np.ndarray]:
        """Unit-norm vector, or None when the label is out of vocabulary."""

    def similarity(self, a: str, b: str) -> Optional[float]:
        va, vb = self.embed(a), self.embed(b)
        if va is None or vb is None:
            return None
        return float(np.dot(va, vb))

    def describe(self) -> dict:
        return {'type': self.name}
