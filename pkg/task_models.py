#!/usr/bin/env python3
"""
Downstream task models
SE-ResNet patch classifier and Faster R-CNN nodule localizer, chosen by name
from backbone registries
"""

from typing import Callable, Dict, Sequence

import torch
import torch.nn as nn
from torchvision.models.detection import FasterRCNN, fasterrcnn_resnet50_fpn
from torchvision.models.detection.anchor_utils import AnchorGenerator
from torchvision.ops import MultiScaleRoIAlign

from config import DetectionConfig, LocalizationConfig
from errors import ConfigError

# Grayscale slices are replicated to 3 channels for the detector
DETECTOR_MEAN = [0.5, 0.5, 0.5]
DETECTOR_STD = [0.25, 0.25, 0.25]


class SEBlock(nn.Module):
    """Squeeze-and-excitation gate: avg pool -> bottleneck -> sigmoid channel weights"""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.avg_pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, _, _ = x.shape
        y = self.avg_pool(x).view(b, c)
        y = torch.sigmoid(self.fc2(torch.relu(self.fc1(y))))
        return x * y.view(b, c, 1, 1)


class SEBasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, reduction: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.se = SEBlock(out_ch, reduction)
        self.shortcut = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                                          nn.BatchNorm2d(out_ch))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.se(self.bn2(self.conv2(out)))
        return torch.relu(out + self.shortcut(x))


class SEResNet(nn.Module):
    """Residual patch classifier with channel attention; logits over {non_nodule, nodule}"""

    def __init__(self, in_channels: int = 1, num_classes: int = 2, widths: Sequence[int] = (32, 64, 128),
                 reduction: int = 16):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False),
                                  nn.BatchNorm2d(widths[0]), nn.ReLU())
        blocks = []
        ch = widths[0]
        for i, width in enumerate(widths):
            blocks.append(SEBasicBlock(ch, width, stride=1 if i == 0 else 2, reduction=reduction))
            ch = width
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(ch, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.pool(self.blocks(self.stem(x))).flatten(1))


def _se_resnet(cfg: DetectionConfig) -> nn.Module:
    return SEResNet(in_channels=1, num_classes=2, widths=tuple(cfg.widths), reduction=cfg.reduction)


def _tiny_faster_rcnn(cfg: LocalizationConfig) -> nn.Module:
    backbone = nn.Sequential(
        nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
        nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
    )
    backbone.out_channels = 64
    anchors = AnchorGenerator(sizes=((8, 16, 32),), aspect_ratios=((0.5, 1.0, 2.0),))
    roi_pool = MultiScaleRoIAlign(featmap_names=["0"], output_size=7, sampling_ratio=2)
    return FasterRCNN(backbone, num_classes=2, rpn_anchor_generator=anchors, box_roi_pool=roi_pool,
                      min_size=cfg.image_min_size, max_size=cfg.image_max_size,
                      image_mean=DETECTOR_MEAN, image_std=DETECTOR_STD,
                      box_score_thresh=cfg.score_threshold)


def _resnet50_fpn(cfg: LocalizationConfig) -> nn.Module:
    return fasterrcnn_resnet50_fpn(weights=None, weights_backbone=None, num_classes=2,
                                   min_size=cfg.image_min_size, max_size=cfg.image_max_size,
                                   image_mean=DETECTOR_MEAN, image_std=DETECTOR_STD,
                                   box_score_thresh=cfg.score_threshold)


CLASSIFIER_BACKBONES: Dict[str, Callable[[DetectionConfig], nn.Module]] = {
    "se_resnet": _se_resnet,
}

LOCALIZER_BACKBONES: Dict[str, Callable[[LocalizationConfig], nn.Module]] = {
    "tiny": _tiny_faster_rcnn,
    "resnet50_fpn": _resnet50_fpn,
}


def build_classifier(cfg: DetectionConfig) -> nn.Module:
    if cfg.backbone not in CLASSIFIER_BACKBONES:
        raise ConfigError(f"detection.backbone '{cfg.backbone}' not in {sorted(CLASSIFIER_BACKBONES)}")
    return CLASSIFIER_BACKBONES[cfg.backbone](cfg)


def build_localizer(cfg: LocalizationConfig) -> nn.Module:
    if cfg.backbone not in LOCALIZER_BACKBONES:
        raise ConfigError(f"localization.backbone '{cfg.backbone}' not in {sorted(LOCALIZER_BACKBONES)}")
    return LOCALIZER_BACKBONES[cfg.backbone](cfg)
