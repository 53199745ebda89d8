"""Synthetic shapes corpus used as the desk-scale fixture.

Each detection image shows one or two instances of a single shape class on a
dark noise background. The corpus root holds:

    images/<split>/<class>_<n>.png     detection images (train / test)
    <split>.json, <split>_<class>.json manifests
    web/<class>/<n>.png, web/index.json "web search" results per query
    web_<class>.json                    ground truth of the web results
    word_vectors.txt                    embedding fixture
    patch_classifier.joblib             region classifier over the alias vocabulary
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from core.exceptions import ConfigError
from core.geometry import Box, iou
from core.images import crop, load_image
from core.manifest import AnnotatedBox, DatasetManifest, ManifestEntry
from providers.classifiers import PatchClassifier
from utils.helper import atomic_write_text, write_json
from utils.logger import setup_logger

logger = setup_logger('shapes')

SHAPES = ('circle', 'square', 'triangle', 'cross', 'ring', 'diamond')

# Label vocabulary of the region classifier: every shape answers to two names
ALIASES = {
    'circle': ['circle', 'disc'],
    'square': ['square', 'block'],
    'triangle': ['triangle', 'wedge'],
    'cross': ['cross', 'plus sign'],
    'ring': ['ring', 'hoop'],
    'diamond': ['diamond', 'rhombus'],
}
BACKGROUND_LABELS = ['background', 'texture']

_SPLIT_CODES = {'train': 0, 'test': 1, 'web': 2, 'classifier': 3, 'vectors': 4}


@dataclass
class RenderedImage:
    image: Image.Image
    objects: List[Tuple[str, Box]] = field(default_factory=list)


def noise_background(rng: np.random.Generator, width: int, height: int) -> Image.Image:
    pixels = rng.integers(0, 90, size=(height, width, 3), dtype=np.uint8)
    return Image.fromarray(pixels)


def draw_shape(draw: ImageDraw.ImageDraw, shape: str, box: Box, color: Tuple[int, int, int]):
    x0, y0 = box.x_min, box.y_min
    x1, y1 = box.x_max - 1, box.y_max - 1
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    side = box.width
    if shape == 'circle':
        draw.ellipse([x0, y0, x1, y1], fill=color)
    elif shape == 'square':
        draw.rectangle([x0, y0, x1, y1], fill=color)
    elif shape == 'triangle':
        draw.polygon([(x0, y1), (x1, y1), (cx, y0)], fill=color)
    elif shape == 'cross':
        half = max(1.0, side / 6.0)
        draw.rectangle([x0, cy - half, x1, cy + half], fill=color)
        draw.rectangle([cx - half, y0, cx + half, y1], fill=color)
    elif shape == 'ring':
        draw.ellipse([x0, y0, x1, y1], outline=color, width=max(2, int(side // 5)))
    elif shape == 'diamond':
        draw.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=color)
    else:
        raise ConfigError(f"Unknown shape {shape!r}; expected one of {SHAPES}")


def _place(rng: np.random.Generator, width: int, height: int, taken: Sequence[Box],
           min_frac: float, max_frac: float, attempts: int = 30) -> Optional[Box]:
    short = min(width, height)
    for _ in range(attempts):
        side = int(rng.integers(int(min_frac * short), int(max_frac * short) + 1))
        x0 = int(rng.integers(0, width - side + 1))
        y0 = int(rng.integers(0, height - side + 1))
        box = Box(x0, y0, x0 + side, y0 + side)
        grown = Box(box.x_min - 1, box.y_min - 1, box.x_max + 1, box.y_max + 1)
        if all(iou(grown, other) == 0.0 for other in taken):
            return box
    return None


def render_image(shapes: Sequence[str], rng: np.random.Generator, size: Sequence[int] = (64, 64),
                 min_frac: float = 0.22, max_frac: float = 0.45) -> RenderedImage:
    """Noise background with one shape instance per entry of `shapes` that fits."""
    width, height = int(size[0]), int(size[1])
    image = noise_background(rng, width, height)
    draw = ImageDraw.Draw(image)
    objects: List[Tuple[str, Box]] = []
    for shape in shapes:
        box = _place(rng, width, height, [b for _, b in objects], min_frac, max_frac)
        if box is None:
            continue
        color = tuple(int(c) for c in rng.integers(150, 256, size=3))
        draw_shape(draw, shape, box, color)
        objects.append((shape, box))
    return RenderedImage(image, objects)


def render_split(root: Path, split: str, classes: Sequence[str], per_class: int, seed: int,
                 size: Sequence[int] = (64, 64), max_instances: int = 2) -> DatasetManifest:
    """Render `per_class` single-class images for every class and return their manifest."""
    entries = []
    for name in classes:
        rng = np.random.default_rng([seed, _SPLIT_CODES[split], SHAPES.index(name)])
        for n in range(per_class):
            count = int(rng.integers(1, max_instances + 1))
            rendered = render_image([name] * count, rng, size)
            rel = f"images/{split}/{name}_{n:04d}.png"
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            rendered.image.save(path)
            boxes = [AnnotatedBox(box, shape) for shape, box in rendered.objects]
            entries.append(ManifestEntry(rel, int(size[0]), int(size[1]), boxes))
    return DatasetManifest(list(classes), entries, {'split': split, 'seed': seed}, str(root))


def render_web(root: Path, classes: Sequence[str], per_class: int, seed: int, size: Sequence[int] = (96, 96),
               distractor_rate: float = 0.2) -> Dict[str, DatasetManifest]:
    """Noisy search results: most images show the query shape, some show another class only."""
    web_root = root / 'web'
    index: Dict[str, List[str]] = {}
    truths = {}
    for name in classes:
        rng = np.random.default_rng([seed, _SPLIT_CODES['web'], SHAPES.index(name)])
        others = [s for s in SHAPES if s != name]
        index[name] = []
        entries = []
        for n in range(per_class):
            distractor = rng.random() < distractor_rate
            shape = others[int(rng.integers(len(others)))] if distractor else name
            rendered = render_image([shape], rng, size)
            rel = f"{name}/{n:04d}.png"
            (web_root / name).mkdir(parents=True, exist_ok=True)
            rendered.image.save(web_root / rel)
            index[name].append(rel)
            boxes = [AnnotatedBox(box, s) for s, box in rendered.objects if s == name]
            if boxes:
                entries.append(ManifestEntry(f"web/{rel}", int(size[0]), int(size[1]), boxes))
        truths[name] = DatasetManifest([name], entries, {'split': 'web', 'seed': seed}, str(root))
    write_json(web_root / 'index.json', index)
    return truths


def word_vectors(classes: Sequence[str] = SHAPES, dim: int = 16, noise: float = 0.2,
                 seed: int = 0) -> Dict[str, np.ndarray]:
    """One orthogonal direction per concept; every word is its concept plus noise."""
    concepts = list(classes) + ['background']
    if dim < len(concepts):
        raise ConfigError(f"Need dim >= {len(concepts)} for {len(concepts)} concepts, got {dim}")
    rng = np.random.default_rng([seed, _SPLIT_CODES['vectors']])
    basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    words = {}
    for index, concept in enumerate(concepts):
        names = ALIASES.get(concept, BACKGROUND_LABELS)
        for alias in names:
            for token in alias.split():
                if token not in words:
                    words[token] = basis[:, index] + noise * rng.normal(size=dim) / np.sqrt(dim)
    return words


def write_word_vectors(path: Path, vectors: Dict[str, np.ndarray]) -> Path:
    lines = [word + ' ' + ' '.join(f"{v:.6f}" for v in vector) for word, vector in vectors.items()]
    return atomic_write_text(path, '\n'.join(lines) + '\n')


def classifier_patches(manifest: DatasetManifest, seed: int, background_per_image: float = 0.5):
    """Jittered object crops labelled with alternating aliases, plus background crops."""

    rng = np.random.default_rng([seed, _SPLIT_CODES['classifier']])
    patches, labels = [], []
    counters = {name: 0 for name in ALIASES}
    background = 0
    for entry in manifest.images:
        image = load_image(manifest.resolve(entry))
        for annotated in entry.boxes:
            b = annotated.box
            jitter = rng.uniform(-0.1, 0.1, size=4) * b.width
            box = Box(b.x_min + jitter[0], b.y_min + jitter[1], b.x_max + jitter[2], b.y_max + jitter[3])
            box = box.clip(entry.width, entry.height)
            if box.is_degenerate:
                continue
            names = ALIASES[annotated.class_name]
            patches.append(crop(image, box))
            labels.append(names[counters[annotated.class_name] % len(names)])
            counters[annotated.class_name] += 1
        if rng.random() < background_per_image:
            taken = [a.box for a in entry.boxes]
            box = _place(rng, entry.width, entry.height, taken, 0.2, 0.4)
            if box is not None:
                patches.append(crop(image, box))
                labels.append(BACKGROUND_LABELS[background % len(BACKGROUND_LABELS)])
                background += 1
    return patches, labels


@dataclass
class ShapesCorpus:
    root: Path
    classes: List[str]

    @property
    def web_root(self) -> Path:
        return self.root / 'web'

    @property
    def word_vectors_path(self) -> Path:
        return self.root / 'word_vectors.txt'

    @property
    def classifier_path(self) -> Path:
        return self.root / 'patch_classifier.joblib'

    def manifest(self, split: str, class_names: Optional[Sequence[str]] = None) -> DatasetManifest:
        manifest = DatasetManifest.load(self.root / f"{split}.json")
        return manifest.restricted_to(class_names) if class_names is not None else manifest

    def web_ground_truth(self, class_name: str) -> DatasetManifest:
        return DatasetManifest.load(self.root / f"web_{class_name}.json")

    def provider_settings(self) -> Dict[str, Any]:
        return {
            'image_source': {'type': 'local', 'root': str(self.web_root)},
            'proposals': {'type': 'edges', 'max_boxes': 20},
            'classifier': {'type': 'patch', 'path': str(self.classifier_path)},
            'embedding': {'type': 'word_vectors', 'path': str(self.word_vectors_path)},
        }


def make_corpus(root, classes: Sequence[str] = SHAPES[:4], train_per_class: int = 200, test_per_class: int = 50,
                web_per_class: int = 40, image_size: Sequence[int] = (64, 64), web_size: Sequence[int] = (96, 96),
                seed: int = 0, train_classifier: bool = True) -> ShapesCorpus:
    """Render the whole fixture corpus under `root`; identical output for identical arguments."""
    unknown = [c for c in classes if c not in SHAPES]
    if unknown:
        raise ConfigError(f"Unknown shapes {unknown}; expected a subset of {SHAPES}")
    root = Path(root).resolve()
    root.mkdir(parents=True, exist_ok=True)
    classes = list(classes)

    for split, per_class in (('train', train_per_class), ('test', test_per_class)):
        manifest = render_split(root, split, classes, per_class, seed, image_size)
        manifest.save(root / f"{split}.json")
        for name in classes:
            manifest.restricted_to([name]).save(root / f"{split}_{name}.json")
        logger.info(f"Rendered {len(manifest)} {split} images for {classes}")

    for name, truth in render_web(root, classes, web_per_class, seed, web_size).items():
        truth.save(root / f"web_{name}.json")
    write_word_vectors(root / 'word_vectors.txt', word_vectors(SHAPES, seed=seed))

    corpus = ShapesCorpus(root, classes)
    if train_classifier:

        # The classifier plays the role of a generic pretrained model, so it sees every shape
        reference = render_split(root / 'classifier', 'train', list(SHAPES), 30, seed + 1, image_size)
        patches, labels = classifier_patches(reference, seed)
        PatchClassifier.fit(patches, labels, seed=seed).save(corpus.classifier_path)
    logger.info(f"Shapes corpus ready at {root}")
    return corpus
