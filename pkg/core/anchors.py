"""Anchor grids and anchor-relative box offsets."""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
import torch

from core.exceptions import ConfigError, GeometryError
from core.geometry import Box


@dataclass(frozen=True)
class AnchorConfig:
    pyramid_levels: Tuple[int, ...] = (8, 16)
    scales: Tuple[float, ...] = (2.0, 3.0)
    aspect_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        object.__setattr__(self, 'pyramid_levels', tuple(int(s) for s in self.pyramid_levels))
        object.__setattr__(self, 'scales', tuple(float(s) for s in self.scales))
        object.__setattr__(self, 'aspect_ratios', tuple(float(r) for r in self.aspect_ratios))
        if not self.pyramid_levels or any(s <= 0 for s in self.pyramid_levels):
            raise ConfigError(f"Strides must be positive: {self.pyramid_levels}")
        if any(b <= a for a, b in zip(self.pyramid_levels, self.pyramid_levels[1:])):
            raise ConfigError(f"Strides must be strictly increasing: {self.pyramid_levels}")
        if self.num_anchors < 1:
            raise ConfigError("Need at least one scale and one aspect ratio")

    @property
    def num_anchors(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    def grid_size(self, stride: int, image_w: int, image_h: int) -> Tuple[int, int]:
        """(rows, cols) of the cell grid for one level."""
        return math.ceil(image_h / stride), math.ceil(image_w / stride)

    def to_dict(self):
        return {
            'pyramid_levels': list(self.pyramid_levels),
            'scales': list(self.scales),
            'aspect_ratios': list(self.aspect_ratios),
        }

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data['pyramid_levels']), tuple(data['scales']), tuple(data['aspect_ratios']))


class Anchor(NamedTuple):
    box: Box
    level: int
    row: int
    col: int
    slot: int


def _slot_shapes(cfg: AnchorConfig, stride: int) -> List[Tuple[float, float]]:
    # slot order: scale-major, ratio-minor; ratio is h / w at constant area
    shapes = []
    for scale in cfg.scales:
        side = scale * stride
        for ratio in cfg.aspect_ratios:
            root = math.sqrt(ratio)
            shapes.append((side / root, side * root))
    return shapes


def generate_anchors(cfg: AnchorConfig, image_w: int, image_h: int) -> List[Anchor]:
    """All anchors, ordered level-major, row-major, slot-minor."""
    anchors = []
    for level, stride in enumerate(cfg.pyramid_levels):
        rows, cols = cfg.grid_size(stride, image_w, image_h)
        shapes = _slot_shapes(cfg, stride)
        for row in range(rows):
            cy = (row + 0.5) * stride
            for col in range(cols):
                cx = (col + 0.5) * stride
                for slot, (w, h) in enumerate(shapes):
                    anchors.append(Anchor(Box.from_center(cx, cy, w, h), level, row, col, slot))
    return anchors


@lru_cache(maxsize=32)
def _anchor_array_cached(cfg: AnchorConfig, image_w: int, image_h: int) -> np.ndarray:
    parts = []
    for stride in cfg.pyramid_levels:
        rows, cols = cfg.grid_size(stride, image_w, image_h)
        shapes = np.array(_slot_shapes(cfg, stride), dtype=np.float64)
        cy, cx = np.meshgrid((np.arange(rows) + 0.5) * stride, (np.arange(cols) + 0.5) * stride, indexing='ij')
        centers = np.stack([cx.ravel(), cy.ravel()], axis=1)[:, None, :]
        half = shapes[None, :, :] / 2.0
        boxes = np.concatenate([centers - half, centers + half], axis=2)
        parts.append(boxes.reshape(-1, 4))
    result = np.concatenate(parts, axis=0)
    result.setflags(write=False)
    return result


def anchor_array(cfg: AnchorConfig, image_w: int, image_h: int) -> np.ndarray:
    """(N,4) corner array in generate_anchors order (read-only, cached)."""
    return _anchor_array_cached(cfg, int(image_w), int(image_h))


def encode_offsets(gt: Box, anchor: Box) -> Tuple[float, float, float, float]:
    if anchor.width <= 0 or anchor.height <= 0:
        raise GeometryError(f"Anchor must have positive size: {anchor}")
    if gt.width <= 0 or gt.height <= 0:
        raise GeometryError(f"Ground truth must have positive size: {gt}")
    gcx, gcy, gw, gh = gt.to_center()
    acx, acy, aw, ah = anchor.to_center()
    return ((gcx - acx) / aw, (gcy - acy) / ah, math.log(gw / aw), math.log(gh / ah))


def decode_offsets(offsets: Sequence[float], anchor: Box) -> Box:
    if anchor.width <= 0 or anchor.height <= 0:
        raise GeometryError(f"Anchor must have positive size: {anchor}")
    tx, ty, tw, th = offsets
    acx, acy, aw, ah = anchor.to_center()
    return Box.from_center(acx + tx * aw, acy + ty * ah, aw * math.exp(tw), ah * math.exp(th))


def encode_array(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized encode of matched (N,4) gt/anchor corner arrays."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise GeometryError("Ground truth boxes must have positive size")
    acx = anchors[:, 0] + aw / 2.0
    acy = anchors[:, 1] + ah / 2.0
    gcx = gt[:, 0] + gw / 2.0
    gcy = gt[:, 1] + gh / 2.0
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


# exp() guard for untrained heads
MAX_LOG_SCALE = math.log(1000.0 / 16)


def decode_tensor(offsets: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Vectorized decode of (N,4) offsets against (N,4) corner anchors."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2.0
    acy = anchors[:, 1] + ah / 2.0
    cx = acx + offsets[:, 0] * aw
    cy = acy + offsets[:, 1] * ah
    w = aw * torch.exp(offsets[:, 2].clamp(max=MAX_LOG_SCALE))
    h = ah * torch.exp(offsets[:, 3].clamp(max=MAX_LOG_SCALE))
    return torch.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], dim=1)
