"""Region classifiers over a label vocabulary."""

import threading
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import joblib
import numpy as np
from PIL import Image
from skimage.feature import hog
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from core.exceptions import ProviderError
from core.geometry import Box
from core.images import crop
from core.manifest import LabelScore
from providers.base import ClassifierProvider, SourceImage
from utils.logger import setup_logger

logger = setup_logger('classifiers')


def _top_k(vocabulary: Sequence[str], scores: np.ndarray, k: int) -> List[LabelScore]:
    order = np.argsort(-scores, kind='stable')[:k]
    return [LabelScore(vocabulary[i], float(scores[i])) for i in order]


def patch_features(patch: Image.Image, patch_size: int = 32) -> np.ndarray:
    """HOG descriptor of the grey patch plus its mean colour."""
    rgb = np.asarray(patch.convert('RGB').resize((patch_size, patch_size), Image.BILINEAR), dtype=np.float64) / 255.0
    grey = rgb.mean(axis=2)
    descriptor = hog(grey, orientations=9, pixels_per_cell=(8, 8), cells_per_block=(2, 2), feature_vector=True)
    return np.concatenate([descriptor, rgb.reshape(-1, 3).mean(axis=0)])


class PatchClassifier(ClassifierProvider):
    """HOG + logistic regression classifier over an alias vocabulary."""

    name = 'patch'

    def __init__(self, estimator, patch_size: int = 32):
        self.estimator = estimator
        self.patch_size = patch_size

    @property
    def vocabulary(self) -> List[str]:
        return [str(c) for c in self.estimator.classes_]

    @classmethod
    def fit(cls, patches: Sequence[Image.Image], labels: Sequence[str], patch_size: int = 32,
            seed: int = 0) -> 'PatchClassifier':
        if len(set(labels)) < 2:
            raise ProviderError("Patch classifier needs at least two labels")
        features = np.stack([patch_features(p, patch_size) for p in patches])
        estimator = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000, random_state=seed))
        estimator.fit(features, list(labels))
        logger.info(f"Fitted patch classifier on {len(labels)} patches, {len(set(labels))} labels")
        return cls(estimator, patch_size)

    def classify(self, image: Image.Image, box: Box, k: int, source: Optional[SourceImage] = None) -> List[LabelScore]:
        return self.classify_many(image, [box], k, source)[0]

    def classify_many(self, image: Image.Image, boxes: Sequence[Box], k: int,
                      source: Optional[SourceImage] = None) -> List[List[LabelScore]]:
        if not boxes:
            return []
        features = np.stack([patch_features(crop(image, b), self.patch_size) for b in boxes])
        probabilities = self.estimator.predict_proba(features)
        vocabulary = self.vocabulary
        return [_top_k(vocabulary, row, k) for row in probabilities]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        joblib.dump({'estimator': self.estimator, 'patch_size': self.patch_size}, path)
        return path

    @classmethod
    def load(cls, path) -> 'PatchClassifier':
        path = Path(path)
        if not path.exists():
            raise ProviderError(f"Patch classifier not found: {path}")
        payload = joblib.load(path)
        return cls(payload['estimator'], payload['patch_size'])

    def describe(self) -> dict:
        return {'type': self.name, 'labels': len(self.vocabulary)}


def _box_key(box) -> Tuple[float, ...]:
    values = box.to_list() if isinstance(box, Box) else list(box)
    return tuple(round(float(v), 3) for v in values)


class ScriptedClassifier(ClassifierProvider):
    """Fixed label lists per (image, box), for fixtures.

    predictions: {image path or file name: [{"box": [x0, y0, x1, y1],
                                            "labels": [[name, score], ...]}, ...]}
    """

    name = 'scripted'

    def __init__(self, predictions: Dict[str, Sequence[dict]], vocabulary: Optional[Sequence[str]] = None):
        self.predictions = {}
        names = set()
        for image_key, items in predictions.items():
            table = {}
            for item in items:
                labels = [LabelScore(str(n), float(s)) for n, s in item['labels']]
                names.update(l.name for l in labels)
                table[_box_key(item['box'])] = labels
            self.predictions[image_key] = table
        self._vocabulary = list(vocabulary) if vocabulary is not None else sorted(names)

    @property
    def vocabulary(self) -> List[str]:
        return list(self._vocabulary)

    def classify(self, image: Image.Image, box: Box, k: int, source: Optional[SourceImage] = None) -> List[LabelScore]:
        table = {}
        if source is not None:
            table = self.predictions.get(source.path) or self.predictions.get(Path(source.path).name, {})
        labels = sorted(table.get(_box_key(box), []), key=lambda l: -l.score)
        return labels[:k]


class CachedClassifier(ClassifierProvider):
    """Memoizes an inner classifier per (image, box, k)."""

    def __init__(self, inner: ClassifierProvider):
        self.inner = inner
        self.name = inner.name
        self._cache: Dict[tuple, List[LabelScore]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @property
    def vocabulary(self) -> List[str]:
        return self.inner.vocabulary

    def classify(self, image: Image.Image, box: Box, k: int, source: Optional[SourceImage] = None) -> List[LabelScore]:
        return self.classify_many(image, [box], k, source)[0]

    def classify_many(self, image: Image.Image, boxes: Sequence[Box], k: int,
                      source: Optional[SourceImage] = None) -> List[List[LabelScore]]:
        path = source.path if source is not None else id(image)
        keys = [(path, _box_key(b), k) for b in boxes]
        with self._lock:
            missing = [i for i, key in enumerate(keys) if key not in self._cache]
            self.hits += len(keys) - len(missing)
            self.misses += len(missing)
        if missing:
            fresh = self.inner.classify_many(image, [boxes[i] for i in missing], k, source)
            with self._lock:
                for i, labels in zip(missing, fresh):
                    self._cache[keys[i]] = labels
        with self._lock:
            return [list(self._cache[key]) for key in keys]

    def describe(self) -> dict:
        return self.inner.describe()
