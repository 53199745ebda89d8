"""Old-class exemplar selection, persistence and rehearsal merging."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from sklearn.cluster import KMeans

from core.detector import DetectorModel
from core.exceptions import ExemplarError
from core.images import load_image, resize_array, to_tensor
from core.manifest import (PROVENANCE_EXEMPLAR, PROVENANCE_NEW, AnnotatedBox, DatasetManifest,
                           ManifestEntry)
from utils.helper import read_json, write_json
from utils.logger import setup_logger

logger = setup_logger('exemplars')

STRATEGIES = ('random', 'mean_closest', 'cluster')

FeatureExtractor = Callable[[Sequence[ManifestEntry]], np.ndarray]


@dataclass
class ClassExemplars:
    class_name: str
    strategy: str
    seed: int
    entries: List[ManifestEntry] = field(default_factory=list)

    def to_dict(self):
        return {
            'class_name': self.class_name,
            'strategy': self.strategy,
            'seed': self.seed,
            'entries': [{
                'image_path': e.path,
                'width': e.width,
                'height': e.height,
                'boxes': [b.to_dict() for b in e.boxes],
            } for e in self.entries],
        }

    @classmethod
    def from_dict(cls, data) -> 'ClassExemplars':
        try:
            entries = [ManifestEntry(str(e['image_path']), int(e['width']), int(e['height']),
                                     [AnnotatedBox.from_dict(b) for b in e['boxes']], PROVENANCE_EXEMPLAR)
                       for e in data['entries']]
            return cls(str(data['class_name']), str(data['strategy']), int(data['seed']), entries)
        except (KeyError, TypeError, ValueError) as e:
            raise ExemplarError(f"Malformed exemplar record: {e}") from e


@dataclass
class ExemplarSet:
    classes: Dict[str, ClassExemplars] = field(default_factory=dict)

    @property
    def class_names(self) -> List[str]:
        return list(self.classes)

    @property
    def is_empty(self) -> bool:
        return self.total_count == 0

    @property
    def total_count(self) -> int:
        return sum(len(c.entries) for c in self.classes.values())

    def counts(self) -> Dict[str, int]:
        return {name: len(c.entries) for name, c in self.classes.items()}

    def entries(self) -> List[ManifestEntry]:
        return [e for c in self.classes.values() for e in c.entries]

    def to_list(self):
        return [c.to_dict() for c in self.classes.values()]

    @classmethod
    def from_list(cls, records) -> 'ExemplarSet':
        if not isinstance(records, list):
            raise ExemplarError("Exemplar records must be a JSON list")
        exemplars = cls()
        for record in records:
            item = ClassExemplars.from_dict(record)
            exemplars.classes[item.class_name] = item
        return exemplars


def per_class_counts(class_names: Sequence[str], per_class: int, total_budget: Optional[int] = None) -> Dict[str, int]:
    """Fixed per-class count, or a total budget split evenly with the remainder to the earliest classes."""
    if total_budget is None:
        return {name: per_class for name in class_names}
    if total_budget < 0:
        raise ExemplarError(f"total_budget must be >= 0, got {total_budget}")
    base, remainder = divmod(total_budget, max(1, len(class_names)))
    return {name: base + (1 if i < remainder else 0) for i, name in enumerate(class_names)}


def images_by_class(manifest: DatasetManifest) -> Dict[str, List[ManifestEntry]]:
    """Candidate images per class with absolute paths."""
    result = {}
    for class_name in manifest.classes:
        result[class_name] = [
            ManifestEntry(str(manifest.resolve(e).resolve()), e.width, e.height, list(e.boxes), e.provenance)
            for e in manifest.images_for_class(class_name)
        ]
    return result


def _herding(features: np.ndarray, count: int) -> List[int]:
    """Greedily add the image that keeps the running exemplar mean closest to the class mean."""
    class_mean = features.mean(axis=0)
    chosen: List[int] = []
    running = np.zeros_like(class_mean)
    remaining = list(range(len(features)))
    for k in range(1, count + 1):
        candidates = features[remaining]
        distances = np.linalg.norm(class_mean - (running + candidates) / k, axis=1)
        pick = remaining[int(np.argmin(distances))]
        chosen.append(pick)
        running = running + features[pick]
        remaining.remove(pick)
    return chosen


def _cluster(features: np.ndarray, count: int, rng: np.random.Generator, seed: int) -> List[int]:
    labels = KMeans(n_clusters=count, random_state=seed, n_init=10).fit_predict(features)
    chosen = []
    for cluster in range(count):
        members = np.flatnonzero(labels == cluster)
        if len(members):
            chosen.append(int(rng.choice(members)))
    if len(chosen) < count:
        leftover = [i for i in range(len(features)) if i not in chosen]
        chosen.extend(int(i) for i in rng.choice(leftover, count - len(chosen), replace=False))
    return chosen


def select_class_exemplars(class_name: str, entries: Sequence[ManifestEntry], feature_extractor: Optional[FeatureExtractor],
                           count: int, strategy: str, seed: int, class_index: int = 0) -> ClassExemplars:
    if strategy not in STRATEGIES:
        raise ExemplarError(f"Unknown exemplar strategy {strategy!r}, expected one of {STRATEGIES}")
    if not entries:
        raise ExemplarError(f"No images available for class {class_name!r}")
    if count > len(entries):
        logger.warning(f"Requested {count} exemplars for {class_name!r} but only {len(entries)} images exist; taking all")
    count = min(count, len(entries))

    rng = np.random.default_rng([seed, class_index])
    if count == 0:
        chosen = []
    elif count == len(entries):
        chosen = list(range(len(entries)))
    elif strategy == 'random':
        chosen = [int(i) for i in rng.choice(len(entries), count, replace=False)]
    else:
        if feature_extractor is None:
            raise ExemplarError(f"Strategy {strategy!r} needs a feature extractor")
        features = np.asarray(feature_extractor(entries), dtype=np.float64)
        if strategy == 'mean_closest':
            chosen = _herding(features, count)
        else:
            chosen = _cluster(features, count, rng, seed)

    selected = [ManifestEntry(entries[i].path, entries[i].width, entries[i].height, list(entries[i].boxes),
                              PROVENANCE_EXEMPLAR) for i in chosen]
    return ClassExemplars(class_name, strategy, seed, selected)


def select_exemplars(images_per_class: Dict[str, Sequence[ManifestEntry]], feature_extractor: Optional[FeatureExtractor],
                     count: int, strategy: str = 'cluster', seed: int = 0,
                     total_budget: Optional[int] = None) -> ExemplarSet:
    """Pick exemplar images for every old class."""
    counts = per_class_counts(list(images_per_class), count, total_budget)
    exemplars = ExemplarSet()
    for index, (class_name, entries) in enumerate(images_per_class.items()):
        exemplars.classes[class_name] = select_class_exemplars(
            class_name, entries, feature_extractor, counts[class_name], strategy, seed, index)
    logger.info(f"Selected {exemplars.total_count} exemplars ({strategy}) for {len(exemplars.classes)} classes")
    return exemplars


def detector_feature_extractor(model: DetectorModel, batch_size: int = 32) -> FeatureExtractor:
    """Spatial mean of the model's deepest pyramid map for each image."""
    image_size = model.config.image_size
    dtype = next(model.parameters()).dtype

    def extract(entries: Sequence[ManifestEntry]) -> np.ndarray:
        vectors = []
        for start in range(0, len(entries), batch_size):
            chunk = entries[start:start + batch_size]
            images = torch.stack([to_tensor(resize_array(load_image(e.path), image_size)) for e in chunk])
            vectors.append(model.extract_features(images.to(dtype)).double().numpy())
        return np.concatenate(vectors, axis=0)

    return extract


def save_exemplars(exemplars: ExemplarSet, path: Union[str, Path]) -> Path:
    return write_json(path, exemplars.to_list())


def load_exemplars(path: Union[str, Path]) -> ExemplarSet:
    path = Path(path)
    if not path.exists():
        raise ExemplarError(f"Exemplar file not found: {path}")
    records = read_json(path)
    if not isinstance(records, list):
        raise ExemplarError(f"Exemplar file {path} must hold a JSON list")
    return ExemplarSet.from_list(records)


def merge_with_new_data(exemplars: Optional[ExemplarSet], new_manifest: DatasetManifest,
                        seed: int = 0) -> DatasetManifest:
    """Union of exemplar and new images, shuffled stably under `seed`, tagged by provenance."""
    if exemplars is None or exemplars.is_empty:
        return new_manifest
    new_classes = {b.class_name for e in new_manifest.images if e.provenance != PROVENANCE_EXEMPLAR for b in e.boxes}
    collision = set(exemplars.class_names) & new_classes
    if collision:
        raise ExemplarError(f"Exemplar classes collide with new classes: {sorted(collision)}")

    by_path: Dict[str, ManifestEntry] = {}
    for entry in new_manifest.images:
        path = str(new_manifest.resolve(entry))
        provenance = entry.provenance if entry.provenance == PROVENANCE_EXEMPLAR else PROVENANCE_NEW
        by_path.setdefault(path, ManifestEntry(path, entry.width, entry.height, list(entry.boxes), provenance))
    for entry in exemplars.entries():
        by_path.setdefault(entry.path, entry.with_provenance(PROVENANCE_EXEMPLAR))

    ordered = [by_path[p] for p in sorted(by_path)]
    permutation = np.random.default_rng(seed).permutation(len(ordered))
    images = [ordered[i] for i in permutation]

    classes = list(exemplars.class_names) + [c for c in new_manifest.classes if c not in exemplars.classes]
    logger.info(f"Merged {exemplars.total_count} exemplars with {len(new_manifest)} new images -> {len(images)}")
    return DatasetManifest(classes, images, dict(new_manifest.config))
