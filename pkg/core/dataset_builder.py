"""Automatic training-set construction from noisy web images.

fetch -> propose + classify -> vote credible labels -> purify. Per-image work
fans out over a thread pool; the vote and purification run as a sequential
reduce over the fetched order, so the manifest is reproducible.
"""

import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from core.exceptions import DatasetError, ProviderError
from core.geometry import Box, intersection_area, iou, iop
from core.images import load_image
from core.manifest import AnnotatedBox, DatasetManifest, LabelScore, ManifestEntry
from providers import ProviderSet
from providers.base import ClassifierProvider, EmbeddingProvider, ImageSource, ProposalProvider, SourceImage
from providers.classifiers import CachedClassifier
from utils.logger import setup_logger

logger = setup_logger('dataset_builder')


@dataclass
class BoxPrediction:
    box: Box
    labels: List[LabelScore]


@dataclass
class ImagePredictions:
    source: SourceImage
    predictions: List[BoxPrediction] = field(default_factory=list)
    proposal_count: int = 0


@dataclass
class CredibleLabelSet:
    query: str
    true_label: str
    aliases: List[str] = field(default_factory=list)
    votes: Dict[str, int] = field(default_factory=dict)

    @property
    def labels(self) -> List[str]:
        return [self.true_label] + [a for a in self.aliases if a != self.true_label]

    def __contains__(self, label: str) -> bool:
        return label == self.true_label or label in self.aliases

    def to_dict(self) -> Dict[str, Any]:
        return {'query': self.query, 'true_label': self.true_label, 'aliases': list(self.aliases)}


@dataclass
class BuildReport:
    query: str
    fetched_images: int = 0
    predicted_images: int = 0
    proposals: int = 0
    voting_boxes: int = 0
    credible_boxes: int = 0
    retained_boxes: int = 0
    retained_images: int = 0
    credible_labels: List[str] = field(default_factory=list)
    fetch_s: float = 0.0
    vote_s: float = 0.0
    purify_s: float = 0.0
    classifier_cache_hits: int = 0

    @property
    def build_s(self) -> float:
        return self.vote_s + self.purify_s

    @property
    def total_s(self) -> float:
        return self.fetch_s + self.build_s

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['build_s'] = self.build_s
        data['total_s'] = self.total_s
        return data


@dataclass
class ConstructionScore:
    retention_rate: float
    fp_rate: float
    fp_defined: bool
    images: int
    boxes: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def is_large_enough(box: Box, width: int, height: int, thr_b: float) -> bool:
    """size(b) > thr_b, with thr_b a fraction of the image area."""
    return box.area > thr_b * width * height


def fetch_images(source: ImageSource, query: str, limit: int) -> List[SourceImage]:
    if limit < 1:
        raise DatasetError(f"Image count must be >= 1, got {limit}")
    images = source.fetch(query, limit)
    if not images:
        raise DatasetError(f"No images retrievable for {query!r}")
    if len(images) < limit:
        logger.warning(f"Requested {limit} images for {query!r}, source returned {len(images)}")
    return images


def predict_image(source: SourceImage, proposals: ProposalProvider, classifier: ClassifierProvider, k: int,
                  thr_b: float) -> ImagePredictions:
    """Proposals above the size threshold with their top-k labels."""
    image = load_image(source.path)
    boxes = [p.box for p in proposals.propose(image, source)]
    kept = [b for b in boxes if not b.is_degenerate and is_large_enough(b, source.width, source.height, thr_b)]
    labels = classifier.classify_many(image, kept, k, source)
    predictions = [BoxPrediction(b, list(l)[:k]) for b, l in zip(kept, labels)]
    return ImagePredictions(source, predictions, len(boxes))


def predict_images(sources: Sequence[SourceImage], proposals: ProposalProvider, classifier: ClassifierProvider,
                   k: int, thr_b: float, workers: int = 1) -> List[ImagePredictions]:
    """Order-preserving fan-out; images whose providers fail are skipped."""

    def run(source: SourceImage) -> Optional[ImagePredictions]:
        try:
            return predict_image(source, proposals, classifier, k, thr_b)
        except (ProviderError, DatasetError) as e:
            logger.warning(f"Skipping {source.path}: {e}")
            return None

    if workers <= 1:
        results = [run(s) for s in sources]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, sources))
    return [r for r in results if r is not None]


def vote_credible_labels(images: Sequence[ImagePredictions], query: str, embedding: EmbeddingProvider,
                         thr_d: float) -> CredibleLabelSet:
    """Most frequent top-k label plus labels semantically close to it and to the query."""
    if not images:
        raise DatasetError("Credible-label voting needs at least one image")
    counter: Counter = Counter()
    for image in images:
        for prediction in image.predictions:
            for label in prediction.labels:
                counter[label.name] += 1
    if not counter:
        raise DatasetError(f"No boxes survived for {query!r}: nothing to vote on")

    ranked = sorted(counter.items(), key=lambda item: (-item[1], item[0]))
    true_label = ranked[0][0]
    aliases = []
    for label, _ in ranked[1:]:
        to_true = embedding.similarity(label, true_label)
        to_query = embedding.similarity(label, query)
        if to_true is None or to_query is None:
            continue
        if to_true + to_query > thr_d:
            aliases.append(label)
    credible = CredibleLabelSet(query, true_label, aliases, dict(ranked))
    logger.info(f"Credible labels for {query!r}: {credible.labels}")
    return credible


def accs(prediction: BoxPrediction, credible: CredibleLabelSet) -> float:
    """Accumulated confidence of the box's credible top-k labels."""
    return float(sum(label.score for label in prediction.labels if label.name in credible))


def is_credible(prediction: BoxPrediction, credible: CredibleLabelSet) -> bool:
    return any(label.name in credible for label in prediction.labels)


def overlaps_too_much(a: Box, b: Box, thr_o: float) -> bool:
    """Intersection larger than thr_o of the smaller box's area."""
    return intersection_area(a, b) > thr_o * min(a.area, b.area)


def purify_image(predictions: Sequence[BoxPrediction], credible: CredibleLabelSet,
                 thr_o: float) -> List[Tuple[BoxPrediction, float]]:
    """Credible boxes with overlaps resolved in favour of the higher ACCS.

    Boxes are visited by descending ACCS (earlier index first on ties) and
    dropped when they overlap an already retained box; survivors keep their
    proposal order.
    """
    candidates = [(i, p, accs(p, credible)) for i, p in enumerate(predictions) if is_credible(p, credible)]
    visit = sorted(candidates, key=lambda item: -item[2])
    kept = []
    for index, prediction, score in visit:
        if any(overlaps_too_much(prediction.box, other.box, thr_o) for _, other, _ in kept):
            continue
        kept.append((index, prediction, score))
    kept.sort(key=lambda item: item[0])
    return [(prediction, score) for _, prediction, score in kept]


def purify(images: Sequence[ImagePredictions], credible: CredibleLabelSet, thr_b: float, thr_o: float,
           class_name: Optional[str] = None, config: Optional[Dict[str, Any]] = None) -> DatasetManifest:
    class_name = class_name or credible.query
    entries = []
    for image in images:
        source = image.source
        sized = [p for p in image.predictions if is_large_enough(p.box, source.width, source.height, thr_b)]
        survivors = purify_image(sized, credible, thr_o)
        if not survivors:
            continue
        boxes = [AnnotatedBox(p.box, class_name, score, tuple(p.labels)) for p, score in survivors]
        entries.append(ManifestEntry(source.path, source.width, source.height, boxes))
    return DatasetManifest([class_name], entries, dict(config or {}))


def build_dataset(query: str, providers: ProviderSet, cfg: Dict[str, Any]) -> Tuple[DatasetManifest, BuildReport]:
    """fetch -> vote -> purify for one class-name query."""
    image_source, proposals = providers.image_source, providers.proposals
    classifier, embedding = providers.classifier, providers.embedding
    report = BuildReport(query)
    config = {
        'thr_b': cfg['thr_b'],
        'thr_d': cfg['thr_d'],
        'thr_o': cfg['thr_o'],
        'k': cfg['k'],
        'provider': {
            'image_source': image_source.describe(),
            'proposals': proposals.describe(),
            'classifier': classifier.describe(),
            'embedding': embedding.describe(),
        },
    }

    started = time.perf_counter()
    sources = fetch_images(image_source, query, int(cfg['images_per_query']))
    report.fetched_images = len(sources)
    report.fetch_s = time.perf_counter() - started
    logger.info(f"[{query}] fetched {len(sources)} images in {report.fetch_s:.2f}s")

    started = time.perf_counter()
    hits_before = classifier.hits if isinstance(classifier, CachedClassifier) else 0
    images = predict_images(sources, proposals, classifier, int(cfg['k']), float(cfg['thr_b']),
                            int(cfg.get('workers', 1)))
    report.predicted_images = len(images)
    report.proposals = sum(i.proposal_count for i in images)
    report.voting_boxes = sum(len(i.predictions) for i in images)
    try:
        credible = vote_credible_labels(images, query, embedding, float(cfg['thr_d']))
    except DatasetError as e:
        logger.warning(f"[{query}] {e}; dataset is empty")
        report.vote_s = time.perf_counter() - started
        return DatasetManifest([query], [], config), report
    report.credible_labels = credible.labels
    report.vote_s = time.perf_counter() - started

    started = time.perf_counter()
    config['credible_labels'] = credible.labels
    manifest = purify(images, credible, float(cfg['thr_b']), float(cfg['thr_o']), query, config)
    report.credible_boxes = sum(1 for i in images for p in i.predictions if is_credible(p, credible))
    report.retained_boxes = manifest.box_count()
    report.retained_images = len(manifest)
    if isinstance(classifier, CachedClassifier):
        report.classifier_cache_hits = classifier.hits - hits_before
    report.purify_s = time.perf_counter() - started
    logger.info(f"[{query}] retained {report.retained_images}/{report.fetched_images} images, "
                f"{report.retained_boxes} boxes")
    return manifest, report


def merge_manifests(manifests: Sequence[DatasetManifest]) -> DatasetManifest:
    """Concatenate per-query manifests; images already present keep their first record."""
    classes: List[str] = []
    images: Dict[str, ManifestEntry] = {}
    for manifest in manifests:
        classes.extend(c for c in manifest.classes if c not in classes)
        for entry in manifest.images:
            path = str(manifest.resolve(entry))
            if path in images:
                images[path].boxes.extend(entry.boxes)
            else:
                images[path] = ManifestEntry(path, entry.width, entry.height, list(entry.boxes), entry.provenance)
    config = dict(manifests[0].config) if manifests else {}
    return DatasetManifest(classes, list(images.values()), config)


def _paths(manifest: DatasetManifest) -> Dict[str, ManifestEntry]:
    return {str(Path(manifest.resolve(e)).resolve()): e for e in manifest.images}


def score_construction(manifest: DatasetManifest, ground_truth: DatasetManifest, iou_thr: float = 0.5,
                       iop_thr: float = 0.5) -> ConstructionScore:
    """Retention rate over ground-truth images and FP rate over generated boxes, in percent."""
    predicted = _paths(manifest)
    truth = _paths(ground_truth)
    if not truth:
        raise DatasetError("Ground truth has no images")

    retained = 0
    for path, gt_entry in truth.items():
        entry = predicted.get(path)
        if entry is None or not gt_entry.boxes:
            continue
        if all(any(iou(g.box, p.box) >= iou_thr for p in entry.boxes) for g in gt_entry.boxes):
            retained += 1

    total_boxes = manifest.box_count()
    false_positives = 0
    for path, entry in predicted.items():
        gt_boxes = truth[path].boxes if path in truth else []
        for p in entry.boxes:
            best = max((iop(g.box, p.box) for g in gt_boxes), default=0.0)
            if best < iop_thr:
                false_positives += 1

    return ConstructionScore(
        retention_rate=100.0 * retained / len(truth),
        fp_rate=100.0 * false_positives / total_boxes if total_boxes else 0.0,
        fp_defined=total_boxes > 0,
        images=len(predicted),
        boxes=total_boxes,
    )
