"""Toy-scale one-stage anchor detector: feature pyramid, class subnet, box subnet.

Class outputs are independent sigmoids. The class subnet's output layer is a
list of blocks, one per learning step; expanding the head appends a block so
the computation of earlier classes is untouched bit for bit.
"""

import copy
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from core.anchors import AnchorConfig, anchor_array, decode_tensor
from core.exceptions import ConfigError
from core.geometry import Box, ScoredBox, nms
from utils.logger import setup_logger

logger = setup_logger('detector')


@dataclass
class DetectorConfig:
    anchor: AnchorConfig = field(default_factory=AnchorConfig)
    image_size: List[int] = field(default_factory=lambda: [64, 64])
    stage_channels: List[int] = field(default_factory=lambda: [16, 32, 32, 32])
    feature_channels: int = 32
    head_channels: int = 32
    prior_probability: float = 0.01

    def __post_init__(self):
        for stride in self.anchor.pyramid_levels:
            stage = int(round(math.log2(stride))) - 1
            if 2 ** (stage + 1) != stride or not 0 <= stage < len(self.stage_channels):
                raise ConfigError(
                    f"Stride {stride} needs a power-of-two stage within {len(self.stage_channels)} stages")

    @property
    def stage_indices(self) -> List[int]:
        return [int(round(math.log2(s))) - 1 for s in self.anchor.pyramid_levels]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'anchor': self.anchor.to_dict(),
            'image_size': list(self.image_size),
            'stage_channels': list(self.stage_channels),
            'feature_channels': self.feature_channels,
            'head_channels': self.head_channels,
            'prior_probability': self.prior_probability,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DetectorConfig':
        return cls(
            anchor=AnchorConfig.from_dict(data['anchor']),
            image_size=list(data['image_size']),
            stage_channels=list(data['stage_channels']),
            feature_channels=int(data['feature_channels']),
            head_channels=int(data['head_channels']),
            prior_probability=float(data['prior_probability']),
        )

    @classmethod
    def from_settings(cls, det: Dict[str, Any]) -> 'DetectorConfig':
        return cls(
            anchor=AnchorConfig(tuple(det['strides']), tuple(det['scales']), tuple(det['aspect_ratios'])),
            image_size=list(det['image_size']),
            stage_channels=list(det['stage_channels']),
            feature_channels=int(det['feature_channels']),
            head_channels=int(det['head_channels']),
            prior_probability=float(det['prior_probability']),
        )


@dataclass
class RawPrediction:
    """Per-level network outputs for a batch."""
    features: List[torch.Tensor]          # [B, C, H, W]
    class_logits: List[torch.Tensor]      # [B, H, W, A, K]
    box_offsets: List[torch.Tensor]       # [B, H, W, A, 4]

    def flat_logits(self) -> torch.Tensor:
        batch = self.class_logits[0].shape[0]
        k = self.class_logits[0].shape[-1]
        return torch.cat([t.reshape(batch, -1, k) for t in self.class_logits], dim=1)

    def flat_offsets(self) -> torch.Tensor:
        batch = self.box_offsets[0].shape[0]
        return torch.cat([t.reshape(batch, -1, 4) for t in self.box_offsets], dim=1)

    def flat_probs(self) -> torch.Tensor:
        return torch.sigmoid(self.flat_logits())


def _conv(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)


class FeatureNet(nn.Module):
    """Stride-2 conv stages with a top-down pyramid over the selected stages."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.stage_indices = cfg.stage_indices
        stages = []
        in_ch = 3
        for out_ch in cfg.stage_channels[:max(self.stage_indices) + 1]:
            stages.append(nn.Sequential(_conv(in_ch, out_ch, stride=2), nn.ReLU(inplace=False)))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.laterals = nn.ModuleList(
            nn.Conv2d(cfg.stage_channels[i], cfg.feature_channels, kernel_size=1) for i in self.stage_indices)
        self.smooth = nn.ModuleList(_conv(cfg.feature_channels, cfg.feature_channels) for _ in self.stage_indices)

    def forward(self, images: torch.Tensor) -> List[torch.Tensor]:
        x = images
        stage_outputs = []
        for stage in self.stages:
            x = stage(x)
            stage_outputs.append(x)

        laterals = [lat(stage_outputs[i]) for lat, i in zip(self.laterals, self.stage_indices)]
        merged = [None] * len(laterals)
        merged[-1] = laterals[-1]
        for level in range(len(laterals) - 2, -1, -1):
            upsampled = F.interpolate(merged[level + 1], size=laterals[level].shape[-2:], mode='nearest')
            merged[level] = laterals[level] + upsampled
        return [smooth(m) for smooth, m in zip(self.smooth, merged)]


class ClassSubnet(nn.Module):
    def __init__(self, cfg: DetectorConfig, class_blocks: Sequence[int]):
        super().__init__()
        self.num_anchors = cfg.anchor.num_anchors
        self.prior_probability = cfg.prior_probability
        self.tower = nn.Sequential(_conv(cfg.feature_channels, cfg.head_channels), nn.ReLU(inplace=False))
        self.blocks = nn.ModuleList()
        for k in class_blocks:
            self.append_block(k)
        for module in self.tower.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.normal_(module.weight, std=0.01)
                nn.init.zeros_(module.bias)

    @property
    def block_sizes(self) -> List[int]:
        return [block.out_channels // self.num_anchors for block in self.blocks]

    def append_block(self, k: int):
        conv = _conv(self.tower[0].out_channels, self.num_anchors * k)
        nn.init.normal_(conv.weight, std=0.01)
        nn.init.constant_(conv.bias, -math.log((1.0 - self.prior_probability) / self.prior_probability))
        self.blocks.append(conv)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        hidden = self.tower(feature)
        batch, _, h, w = hidden.shape
        outputs = []
        for block in self.blocks:
            out = block(hidden)
            k = out.shape[1] // self.num_anchors
            outputs.append(out.view(batch, self.num_anchors, k, h, w).permute(0, 3, 4, 1, 2))
        return torch.cat(outputs, dim=-1)


class BoxSubnet(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.num_anchors = cfg.anchor.num_anchors
        self.tower = nn.Sequential(_conv(cfg.feature_channels, cfg.head_channels), nn.ReLU(inplace=False))
        self.output = _conv(cfg.head_channels, self.num_anchors * 4)
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.normal_(module.weight, std=0.01)
                nn.init.zeros_(module.bias)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        out = self.output(self.tower(feature))
        batch, _, h, w = out.shape
        return out.view(batch, self.num_anchors, 4, h, w).permute(0, 3, 4, 1, 2)


class DetectorModel(nn.Module):
    def __init__(self, config: DetectorConfig, class_names: Sequence[str],
                 class_blocks: Optional[Sequence[int]] = None):
        super().__init__()
        if not class_names:
            raise ConfigError("A detector needs at least one class")
        if len(set(class_names)) != len(class_names):
            raise ConfigError(f"Duplicate class names: {list(class_names)}")
        if class_blocks is None:
            class_blocks = [len(class_names)]
        if sum(class_blocks) != len(class_names):
            raise ConfigError(f"Class blocks {list(class_blocks)} do not cover {len(class_names)} classes")
        self.config = config
        self.class_names = list(class_names)
        self.feature_net = FeatureNet(config)
        self.class_subnet = ClassSubnet(config, class_blocks)
        self.box_subnet = BoxSubnet(config)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_size(self):
        return tuple(self.config.image_size)

    def anchors(self, image_w: Optional[int] = None, image_h: Optional[int] = None) -> torch.Tensor:
        if image_w is None or image_h is None:
            image_w, image_h = self.config.image_size
        dtype = next(self.parameters()).dtype
        return torch.as_tensor(np.array(anchor_array(self.config.anchor, image_w, image_h)), dtype=dtype)

    def forward(self, images: torch.Tensor) -> RawPrediction:
        features = self.feature_net(images)
        return RawPrediction(
            features=features,
            class_logits=[self.class_subnet(f) for f in features],
            box_offsets=[self.box_subnet(f) for f in features],
        )

    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        """Spatial mean of the deepest pyramid map, one vector per image."""
        with torch.no_grad():
            deepest = self.feature_net(images)[-1]
        return deepest.mean(dim=(2, 3))

    def freeze(self) -> 'DetectorModel':
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


def build_detector(config: DetectorConfig, class_names: Sequence[str], seed: Optional[int] = None) -> DetectorModel:
    if seed is not None:
        torch.manual_seed(seed)
    return DetectorModel(config, class_names)


def expand_class_head(model: DetectorModel, n: int, new_class_names: Optional[Sequence[str]] = None,
                      seed: Optional[int] = None) -> DetectorModel:
    """Copy the model and append n randomly initialized class outputs."""
    if n < 1:
        raise ConfigError(f"Can only expand by n >= 1 classes, got {n}")
    if new_class_names is None:
        new_class_names = [f"class_{model.num_classes + i}" for i in range(n)]
    new_class_names = list(new_class_names)
    if len(new_class_names) != n:
        raise ConfigError(f"Expected {n} new class names, got {len(new_class_names)}")
    collision = set(new_class_names) & set(model.class_names)
    if collision:
        raise ConfigError(f"Class names already in the vocabulary: {sorted(collision)}")

    expanded = copy.deepcopy(model)
    expanded.class_names = model.class_names + new_class_names
    if seed is not None:
        torch.manual_seed(seed)
    dtype = next(model.parameters()).dtype
    expanded.class_subnet.append_block(n)
    expanded.class_subnet.blocks[-1].to(dtype)
    for p in expanded.parameters():
        p.requires_grad_(True)
    logger.info(f"Expanded class head {model.num_classes} -> {expanded.num_classes} ({', '.join(new_class_names)})")
    return expanded


def image_to_tensor(image) -> torch.Tensor:
    """HWC uint8/float array or CHW tensor -> CHW float tensor in [0, 1]."""
    if isinstance(image, torch.Tensor):
        return image
    array = np.asarray(image)
    if array.dtype == np.uint8:
        array = array.astype(np.float32) / 255.0
    if array.ndim == 2:
        array = np.repeat(array[:, :, None], 3, axis=2)
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1))).float()


def decode_predictions(logits: torch.Tensor, offsets: torch.Tensor, anchors: torch.Tensor,
                       image_w: float, image_h: float, score_thr: float,
                       max_candidates: Optional[int] = 300) -> List[ScoredBox]:
    """Score-threshold (>=) and decode one image's flat outputs, before NMS.

    logits: [N, K], offsets: [N, 4], anchors: [N, 4].
    """
    probs = torch.sigmoid(logits.detach()).reshape(-1)
    keep = torch.nonzero(probs >= score_thr, as_tuple=False).reshape(-1)
    if keep.numel() == 0:
        return []
    order = torch.sort(probs[keep], descending=True, stable=True).indices
    keep = keep[order]
    if max_candidates is not None:
        keep = keep[:max_candidates]

    k = logits.shape[1]
    anchor_idx = keep // k
    class_idx = keep % k
    boxes = decode_tensor(offsets.detach()[anchor_idx].double(), anchors[anchor_idx].double())
    boxes[:, 0::2] = boxes[:, 0::2].clamp(0, image_w)
    boxes[:, 1::2] = boxes[:, 1::2].clamp(0, image_h)

    results = []
    for box, cls, score in zip(boxes.tolist(), class_idx.tolist(), probs[keep].tolist()):
        results.append(ScoredBox(Box(*box), int(cls), float(min(max(score, 0.0), 1.0))))
    return results


def detect_batch(model: DetectorModel, images: torch.Tensor, score_thr: float = 0.05, nms_thr: float = 0.5,
                 max_candidates: Optional[int] = 300) -> List[List[ScoredBox]]:
    model.eval()
    with torch.no_grad():
        raw = model(images)
    image_h, image_w = images.shape[-2:]
    anchors = model.anchors(image_w, image_h)
    logits = raw.flat_logits()
    offsets = raw.flat_offsets()
    results = []
    for i in range(images.shape[0]):
        candidates = decode_predictions(logits[i], offsets[i], anchors, image_w, image_h, score_thr, max_candidates)
        results.append(nms(candidates, nms_thr))
    return results


def detect(model: DetectorModel, image, score_thr: float = 0.05, nms_thr: float = 0.5,
           max_candidates: Optional[int] = 300) -> List[ScoredBox]:
    """Run the detector on one image; scores >= score_thr, class-wise NMS."""
    if model.num_classes < 1:
        raise ConfigError("Model has no classes")
    tensor = image_to_tensor(image).to(next(model.parameters()).dtype)
    return detect_batch(model, tensor.unsqueeze(0), score_thr, nms_thr, max_candidates)[0]
