"""Training-set manifests: image references plus annotated boxes with provenance."""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

from core.exceptions import GeometryError, ManifestError, VocabularyError
from core.geometry import Box, ScoredBox
from utils.helper import atomic_write_text, to_serializable

PROVENANCE_NEW = 'new'
PROVENANCE_EXEMPLAR = 'exemplar'


@dataclass(frozen=True)
class LabelScore:
    name: str
    score: float

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'score': float(self.score)}


@dataclass(frozen=True)
class AnnotatedBox:
    box: Box
    class_name: str
    accs: Optional[float] = None
    labels: tuple = ()

    def __post_init__(self):
        if self.box.is_degenerate:
            raise ManifestError(f"Degenerate box for class {self.class_name!r}: {self.box}")
        object.__setattr__(self, 'labels', tuple(self.labels))

    def to_dict(self) -> Dict[str, Any]:
        data = {
            'x_min': self.box.x_min,
            'y_min': self.box.y_min,
            'x_max': self.box.x_max,
            'y_max': self.box.y_max,
            'class': self.class_name,
        }
        if self.accs is not None:
            data['accs'] = float(self.accs)
        if self.labels:
            data['labels'] = [label.to_dict() for label in self.labels]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AnnotatedBox':
        try:
            box = Box(float(data['x_min']), float(data['y_min']), float(data['x_max']), float(data['y_max']))
            labels = tuple(LabelScore(str(l['name']), float(l['score'])) for l in data.get('labels', []))
            accs = data.get('accs')
            return cls(box, str(data['class']), None if accs is None else float(accs), labels)
        except (KeyError, TypeError, ValueError, GeometryError) as e:
            if isinstance(e, ManifestError):
                raise
            raise ManifestError(f"Malformed box annotation {data!r}: {e}") from e


@dataclass
class ManifestEntry:
    path: str
    width: int
    height: int
    boxes: List[AnnotatedBox] = field(default_factory=list)
    provenance: str = PROVENANCE_NEW

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ManifestError(f"Image {self.path} has invalid size {self.width}x{self.height}")

    @property
    def class_names(self) -> List[str]:
        return sorted({b.class_name for b in self.boxes})

    def scored_boxes(self, vocabulary: Sequence[str]) -> List[ScoredBox]:
        """Boxes as ScoredBox with class ids in `vocabulary`."""
        index = {name: i for i, name in enumerate(vocabulary)}
        result = []
        for b in self.boxes:
            if b.class_name not in index:
                raise VocabularyError(f"Class {b.class_name!r} of {self.path} is not in {list(vocabulary)}")
            result.append(ScoredBox(b.box, index[b.class_name], 1.0))
        return result

    def with_provenance(self, provenance: str) -> 'ManifestEntry':
        return ManifestEntry(self.path, self.width, self.height, list(self.boxes), provenance)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'path': self.path,
            'width': self.width,
            'height': self.height,
            'provenance': self.provenance,
            'boxes': [b.to_dict() for b in self.boxes],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ManifestEntry':
        try:
            return cls(
                path=str(data['path']),
                width=int(data['width']),
                height=int(data['height']),
                boxes=[AnnotatedBox.from_dict(b) for b in data.get('boxes', [])],
                provenance=str(data.get('provenance', PROVENANCE_NEW)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ManifestError(f"Malformed manifest image {data!r}: {e}") from e


@dataclass
class DatasetManifest:
    classes: List[str]
    images: List[ManifestEntry] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)
    base_dir: Optional[str] = None      # relative image paths resolve against this

    def __len__(self):
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    @property
    def is_empty(self) -> bool:
        return not self.images

    def box_count(self) -> int:
        return sum(len(entry.boxes) for entry in self.images)

    def resolve(self, entry: ManifestEntry) -> Path:
        path = Path(entry.path)
        if path.is_absolute() or self.base_dir is None:
            return path
        return Path(self.base_dir) / path

    def images_for_class(self, class_name: str) -> List[ManifestEntry]:
        return [entry for entry in self.images if any(b.class_name == class_name for b in entry.boxes)]

    def restricted_to(self, class_names: Iterable[str]) -> 'DatasetManifest':
        """Keep only boxes of the given classes; images left without boxes are dropped."""
        keep = set(class_names)
        images = []
        for entry in self.images:
            boxes = [b for b in entry.boxes if b.class_name in keep]
            if boxes:
                images.append(ManifestEntry(entry.path, entry.width, entry.height, boxes, entry.provenance))
        return DatasetManifest([c for c in self.classes if c in keep], images, dict(self.config), self.base_dir)

    def validate_boxes(self):
        known = set(self.classes)
        for entry in self.images:
            for b in entry.boxes:
                if b.class_name not in known:
                    raise ManifestError(f"Box class {b.class_name!r} in {entry.path} is not listed in {self.classes}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'classes': list(self.classes),
            'config': to_serializable(self.config),
            'images': [entry.to_dict() for entry in self.images],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n'

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DatasetManifest':
        if not isinstance(data, dict) or 'images' not in data:
            raise ManifestError("Manifest must be an object with an 'images' list")
        images = [ManifestEntry.from_dict(item) for item in data['images']]
        classes = data.get('classes')
        if classes is None:
            classes = sorted({b.class_name for entry in images for b in entry.boxes})
        manifest = cls(list(classes), images, dict(data.get('config', {})))
        manifest.validate_boxes()
        return manifest

    def save(self, path: Union[str, Path]) -> Path:
        return atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'DatasetManifest':
        path = Path(path)
        if not path.exists():
            raise ManifestError(f"Manifest not found: {path}")
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ManifestError(f"Manifest {path} is not valid JSON: {e}") from e
        manifest = cls.from_dict(data)
        manifest.base_dir = str(path.resolve().parent)
        return manifest
