"""Task-specific feature encoders built on a 50-layer residual backbone.

Each encoder owns a full copy of the backbone and emits the four stage
outputs as a pyramid of channel sizes (256, 512, 1024, 2048) at strides
(4, 8, 16, 32).
"""

from typing import NamedTuple

import torch
import torch.nn as nn
from torchvision.models import resnet50

PYRAMID_CHANNELS = (256, 512, 1024, 2048)


class FeaturePyramid(NamedTuple):
    f1: torch.Tensor  # B x 256  x H/4  x W/4
    f2: torch.Tensor  # B x 512  x H/8  x W/8
    f3: torch.Tensor  # B x 1024 x H/16 x W/16
    f4: torch.Tensor  # B x 2048 x H/32 x W/32


def check_pyramid(pyramid):
    """Validate channel counts and level-to-level halving."""
    for level, (f, channels) in enumerate(zip(pyramid, PYRAMID_CHANNELS), 1):
        if f.ndim != 4 or f.shape[1] != channels:
            raise ValueError(f"pyramid level {level} must have {channels} channels, got {tuple(f.shape)}")
    for a, b in zip(pyramid[:-1], pyramid[1:]):
        if (a.shape[-2] + 1) // 2 != b.shape[-2] or (a.shape[-1] + 1) // 2 != b.shape[-1]:
            raise ValueError("pyramid spatial sizes must halve from level to level")
    return pyramid


class BackboneLoadError(RuntimeError):
    """Raised when a pretrained store does not match the backbone."""


def load_backbone_store(backbone, store):
    """Load a serialized backbone state dict, validating tensor shapes.

    Entries the backbone does not use (e.g. the classifier head) are
    ignored; shape mismatches are collected and reported together.
    """
    own = backbone.state_dict()
    bad = [
        f"{key}: store {tuple(value.shape)} vs backbone {tuple(own[key].shape)}"
        for key, value in store.items()
        if key in own and tuple(value.shape) != tuple(own[key].shape)
    ]
    if bad:
        raise BackboneLoadError("pretrained store mismatch: " + "; ".join(bad))
    backbone.load_state_dict({k: v for k, v in store.items() if k in own}, strict=False)


class TaskEncoder(nn.Module):
    """One branch's backbone; forward returns the four-level pyramid."""

    def __init__(self, pretrained_store=None):
        super().__init__()
        backbone = resnet50(weights=None)
        if pretrained_store is not None:
            load_backbone_store(backbone, pretrained_store)
        self.stem = nn.Sequential(backbone.conv1, backbone.bn1, backbone.relu, backbone.maxpool)
        self.layer1 = backbone.layer1
        self.layer2 = backbone.layer2
        self.layer3 = backbone.layer3
        self.layer4 = backbone.layer4

    def forward(self, images):
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W images, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"image size must be divisible by 32, got {h}x{w}")
        x = self.stem(images)
        f1 = self.layer1(x)
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        f4 = self.layer4(f3)
        return FeaturePyramid(f1, f2, f3, f4)


def init_encoders(pretrained_store=None):
    """Build the saliency and camouflage encoders.

    With a store both start from the same weights but never share tensors;
    without one each gets its own random initialization.
    """
    return TaskEncoder(pretrained_store), TaskEncoder(pretrained_store)
