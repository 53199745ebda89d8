"""Image loading and resizing to the detector's input size."""

from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image

from core.exceptions import DatasetError
from core.geometry import Box, ScoredBox
from core.manifest import DatasetManifest, ManifestEntry


def load_image(path: Union[str, Path]) -> Image.Image:
    try:
        with Image.open(path) as image:
            return image.convert('RGB')
    except (OSError, ValueError) as e:
        raise DatasetError(f"Cannot read image {path}: {e}") from e


def resize_array(image: Image.Image, size: Sequence[int]) -> np.ndarray:
    """HWC uint8 array of the image resized to (width, height)."""
    width, height = int(size[0]), int(size[1])
    if image.size != (width, height):
        image = image.resize((width, height), Image.BILINEAR)
    return np.asarray(image, dtype=np.uint8)


def to_tensor(array: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1))).float() / 255.0


def scale_boxes(boxes: Sequence[ScoredBox], sx: float, sy: float) -> List[ScoredBox]:
    return [ScoredBox(b.box.scale(sx, sy), b.class_id, b.score) for b in boxes]


def prepare_entry(manifest: DatasetManifest, entry: ManifestEntry, vocabulary: Sequence[str],
                  image_size: Sequence[int]) -> Tuple[torch.Tensor, List[ScoredBox]]:
    """Network-sized CHW tensor and targets rescaled to it."""
    image = load_image(manifest.resolve(entry))
    sx = image_size[0] / float(entry.width)
    sy = image_size[1] / float(entry.height)
    tensor = to_tensor(resize_array(image, image_size))
    return tensor, scale_boxes(entry.scored_boxes(vocabulary), sx, sy)


def rescale_detections(boxes: Sequence[ScoredBox], image_size: Sequence[int], width: int,
                       height: int) -> List[ScoredBox]:
    """Map detections on the network input back to original image pixels."""
    sx = width / float(image_size[0])
    sy = height / float(image_size[1])
    return [ScoredBox(b.box.scale(sx, sy).clip(width, height), b.class_id, b.score) for b in boxes]


def blank_image(image_size: Sequence[int]) -> torch.Tensor:
    return torch.zeros((3, int(image_size[1]), int(image_size[0])))


def crop(image: Image.Image, box: Box) -> Image.Image:
    return image.crop((int(box.x_min), int(box.y_min), int(np.ceil(box.x_max)), int(np.ceil(box.y_max))))
