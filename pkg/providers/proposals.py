"""Class-agnostic box proposal providers."""

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image
from skimage.color import rgb2gray
from skimage.filters import sobel
from skimage.measure import regionprops
from skimage.segmentation import felzenszwalb

from core.detector import DetectorModel, detect
from core.geometry import Box, ScoredBox, nms
from core.images import rescale_detections, resize_array
from providers.base import ProposalProvider, SourceImage
from utils.logger import setup_logger

logger = setup_logger('proposals')


class DetectorProposals(ProposalProvider):
    """Detections of an existing model with class identity dropped."""

    name = 'deep'

    def __init__(self, model: DetectorModel, score_thr: float = 0.2, nms_thr: float = 0.5, max_boxes: int = 100):
        self.model = model.freeze()
        self.score_thr = score_thr
        self.nms_thr = nms_thr
        self.max_boxes = max_boxes

    def propose(self, image: Image.Image, source: SourceImage) -> List[ScoredBox]:
        size = self.model.config.image_size
        detections = detect(self.model, resize_array(image, size), self.score_thr, self.nms_thr)
        detections = rescale_detections(detections, size, image.width, image.height)
        agnostic = [ScoredBox(d.box, 0, d.score) for d in detections if not d.box.is_degenerate]
        return nms(agnostic, self.nms_thr)[:self.max_boxes]

    def describe(self) -> dict:
        return {'type': self.name, 'score_thr': self.score_thr, 'classes': self.model.class_names}


class EdgeProposals(ProposalProvider):
    """Segment-driven proposals ranked by edge strength along the box outline."""

    name = 'edges'

    def __init__(self, max_boxes: int = 20, scales: Sequence[float] = (50.0, 150.0, 400.0), sigma: float = 0.8,
                 min_size: int = 20, min_side: int = 4, dedupe_iou: float = 0.9):
        self.max_boxes = max_boxes
        self.scales = tuple(scales)
        self.sigma = sigma
        self.min_size = min_size
        self.min_side = min_side
        self.dedupe_iou = dedupe_iou

    @staticmethod
    def _outline_score(edges: np.ndarray, x0: int, y0: int, x1: int, y1: int) -> float:
        ring = np.concatenate([
            edges[y0, x0:x1], edges[y1 - 1, x0:x1],
            edges[y0:y1, x0], edges[y0:y1, x1 - 1],
        ])
        return float(ring.mean()) if ring.size else 0.0

    def propose(self, image: Image.Image, source: SourceImage) -> List[ScoredBox]:
        pixels = np.asarray(image.convert('RGB'), dtype=np.float64) / 255.0
        edges = sobel(rgb2gray(pixels))
        candidates = {}
        for scale in self.scales:
            segments = felzenszwalb(pixels, scale=scale, sigma=self.sigma, min_size=self.min_size)
            for region in regionprops(segments + 1):
                y0, x0, y1, x1 = region.bbox
                if x1 - x0 < self.min_side or y1 - y0 < self.min_side:
                    continue
                candidates.setdefault((x0, y0, x1, y1), self._outline_score(edges, x0, y0, x1, y1))
        if not candidates:
            return []

        top = max(candidates.values()) or 1.0
        scored = [ScoredBox(Box(float(x0), float(y0), float(x1), float(y1)), 0, min(1.0, score / top))
                  for (x0, y0, x1, y1), score in sorted(candidates.items())]
        kept = nms(scored, self.dedupe_iou)[:self.max_boxes]
        logger.debug(f"{Path(source.path).name}: {len(candidates)} segments -> {len(kept)} proposals")
        return kept

    def describe(self) -> dict:
        return {'type': self.name, 'max_boxes': self.max_boxes}


class ScriptedProposals(ProposalProvider):
    """Fixed boxes per image path (or file name), for fixtures."""

    name = 'scripted'

    def __init__(self, boxes: Dict[str, Sequence[Sequence[float]]]):
        self.boxes = {key: [list(b) for b in value] for key, value in boxes.items()}

    def _lookup(self, path: str) -> Optional[List[List[float]]]:
        if path in self.boxes:
            return self.boxes[path]
        return self.boxes.get(Path(path).name)

    def propose(self, image: Image.Image, source: SourceImage) -> List[ScoredBox]:
        return [ScoredBox(Box.from_list(b), 0, 1.0) for b in self._lookup(source.path) or []]
