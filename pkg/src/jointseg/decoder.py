"""Shared prediction decoder: initial map, holistic refinement, refined map.

Both task branches run through one instance of this module, so its
parameters tie the tasks together. The fusion plumbing compresses every
attended feature to 32 channels and upsamples to a common grid before
concatenation (the initial head fuses at f2's grid, the refined head at
f1's grid by default).
"""

from typing import NamedTuple

import torch
import torch.nn as nn
from torchvision.models import resnet50

from .encoders import check_pyramid, load_backbone_store
from .ops import gaussian_filter, gaussian_kernel2d, upsample_to


class PredictionPair(NamedTuple):
    init_logits: torch.Tensor  # B x 1 x H x W
    refined_logits: torch.Tensor  # B x 1 x H x W


class PositionAttention(nn.Module):
    """Self-attention over spatial positions (bias-free projections)."""

    def __init__(self, channels, reduction=8):
        super().__init__()
        inner = max(channels // reduction, 1)
        self.query = nn.Conv2d(channels, inner, 1, bias=False)
        self.key = nn.Conv2d(channels, inner, 1, bias=False)
        self.value = nn.Conv2d(channels, channels, 1, bias=False)
        self.gamma = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        b, c, h, w = x.shape
        q = self.query(x).flatten(2).transpose(1, 2)  # B x HW x C'
        k = self.key(x).flatten(2)  # B x C' x HW
        attention = torch.softmax(torch.bmm(q, k), dim=-1)  # B x HW x HW
        v = self.value(x).flatten(2)  # B x C x HW
        out = torch.bmm(v, attention.transpose(1, 2)).view(b, c, h, w)
        return self.gamma * out + x


class ChannelAttention(nn.Module):
    """Self-attention over channels via the gram matrix."""

    def __init__(self):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        b, c, h, w = x.shape
        flat = x.flatten(2)  # B x C x HW
        energy = torch.bmm(flat, flat.transpose(1, 2))  # B x C x C
        energy = energy.amax(dim=-1, keepdim=True) - energy
        attention = torch.softmax(energy, dim=-1)
        out = torch.bmm(attention, flat).view(b, c, h, w)
        return self.gamma * out + x


class DualAttention(nn.Module):
    """Position and channel attention summed, compressed to `out_channels`.

    Each branch first reduces the input to a quarter of its channels, as in
    the referenced design. All convolutions are bias-free so a zero feature
    map stays zero end to end.
    """

    def __init__(self, in_channels, out_channels=32, reduction=4):
        super().__init__()
        inner = max(in_channels // reduction, 1)
        self.reduce_position = nn.Conv2d(in_channels, inner, 3, padding=1, bias=False)
        self.reduce_channel = nn.Conv2d(in_channels, inner, 3, padding=1, bias=False)
        self.position = PositionAttention(inner)
        self.channel = ChannelAttention()
        self.fuse = nn.Conv2d(inner, out_channels, 3, padding=1, bias=False)

    def forward(self, x):
        p = self.position(self.reduce_position(x))
        c = self.channel(self.reduce_channel(x))
        return self.fuse(p + c)


class ChannelGate(nn.Module):
    """Squeeze-excite gate: per-channel weights in (0, 1)."""

    def __init__(self, channels, reduction=16, bias=True):
        super().__init__()
        inner = max(channels // reduction, 1)
        self.body = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, inner, 1, bias=bias),
            nn.ReLU(inplace=True),
            nn.Conv2d(inner, channels, 1, bias=bias),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return self.body(x)


class ResidualChannelAttention(nn.Module):
    """Two-conv transform gated per channel, added back onto the input."""

    def __init__(self, channels, reduction=16, bias=True):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, bias=bias),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, bias=bias),
        )
        self.gate = ChannelGate(channels, reduction, bias)

    def forward(self, x):
        t = self.body(x)
        return x + t * self.gate(t)


class HolisticAttention(nn.Module):
    """Broadcast re-weighting of a feature map by a blurred initial map.

    weight = max(gaussian_blur(sigmoid(init)), sigmoid(init)); the blur
    kernel sums to one and uses replicate borders, so a constant map keeps
    its value and the weight never falls below the raw sigmoid.
    """

    def __init__(self, kernel=31, sigma=4.0):
        super().__init__()
        self.register_buffer("blur_kernel", gaussian_kernel2d(kernel, sigma))

    def forward(self, init_logits, feature):
        if init_logits.shape[-2:] != feature.shape[-2:]:
            raise ValueError(
                f"init map {tuple(init_logits.shape[-2:])} must match feature grid {tuple(feature.shape[-2:])}"
            )
        if init_logits.shape[1] != 1:
            raise ValueError("init map must be single-channel")
        attention = torch.sigmoid(init_logits)
        weight = torch.maximum(gaussian_filter(attention, self.blur_kernel), attention)
        return feature * weight


def _conv32(in_channels):
    return nn.Conv2d(in_channels, 32, 3, padding=1)


class SharedDecoder(nn.Module):
    """Decode a feature pyramid into initial and refined logit maps.

    `pretrained_store` seeds the internal copies of the backbone's last two
    stages (they are fresh parameters, never shared with the encoders).
    `head_grid` picks the common grid of the refined head's concatenation.
    """

    def __init__(self, pretrained_store=None, head_grid="f1"):
        super().__init__()
        if head_grid not in ("f1", "f2"):
            raise ValueError(f"head_grid must be 'f1' or 'f2', got {head_grid!r}")
        self.head_grid = head_grid

        backbone = resnet50(weights=None)
        if pretrained_store is not None:
            load_backbone_store(backbone, pretrained_store)
        self.r3 = backbone.layer3
        self.r4 = backbone.layer4

        self.da4_init = DualAttention(2048)
        self.da3_init = DualAttention(1024)
        self.da2_init = DualAttention(512)
        self.re43_init = ResidualChannelAttention(64)
        self.conv43_init = _conv32(64)
        self.re_init = ResidualChannelAttention(96)
        self.cla_init = nn.Conv2d(96, 1, 3, padding=1)

        self.ha = HolisticAttention()
        self.da4_ref = DualAttention(2048)
        self.da3_ref = DualAttention(1024)
        self.da2_ref = DualAttention(512)
        self.re43_ref = ResidualChannelAttention(64)
        self.conv43_ref = _conv32(64)
        self.re432_ref = ResidualChannelAttention(96)
        self.conv432_ref = _conv32(96)
        self.conv_f1 = _conv32(256)
        self.re_ref = ResidualChannelAttention(128)
        self.cla_ref = nn.Conv2d(128, 1, 3, padding=1)

    def forward(self, pyramid):
        f1, f2, f3, f4 = check_pyramid(pyramid)
        g3, g2, g1 = f3.shape[-2:], f2.shape[-2:], f1.shape[-2:]

        d4 = self.da4_init(f4)
        d3 = self.da3_init(f3)
        d2 = self.da2_init(f2)
        f43_init = self.conv43_init(self.re43_init(torch.cat([upsample_to(d4, g3), d3], 1)))
        fused = torch.cat([upsample_to(d4, g2), upsample_to(f43_init, g2), d2], 1)
        init_small = self.cla_init(self.re_init(fused))  # B x 1 at f2's grid

        f_r2 = self.ha(init_small, f2)
        f_r3 = self.r3(f_r2)
        f_r4 = self.r4(f_r3)
        d4r = self.da4_ref(f_r4)
        d3r = self.da3_ref(f_r3)
        d2r = self.da2_ref(f_r2)
        f43 = self.conv43_ref(self.re43_ref(torch.cat([upsample_to(d4r, g3), d3r], 1)))
        f432 = self.conv432_ref(
            self.re432_ref(torch.cat([upsample_to(d4r, g2), upsample_to(f43, g2), d2r], 1))
        )
        grid = g1 if self.head_grid == "f1" else g2
        fused = torch.cat(
            [upsample_to(d4r, grid), upsample_to(f43, grid), upsample_to(f432, grid),
             upsample_to(self.conv_f1(f1), grid)],
            1,
        )
        refined_small = self.cla_ref(self.re_ref(fused))

        out_size = (g1[0] * 4, g1[1] * 4)
        return PredictionPair(
            init_logits=upsample_to(init_small, out_size),
            refined_logits=upsample_to(refined_small, out_size),
        )
