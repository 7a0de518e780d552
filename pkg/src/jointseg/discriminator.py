"""Fully convolutional confidence estimator and gradient-based uncertainty."""

import torch
import torch.nn as nn

# (in, out, kernel, stride, pad) per layer; norm + leaky relu after the first four
LAYER_SPECS = (
    (1, 64, 3, 2, 1),
    (64, 64, 3, 1, 1),
    (64, 64, 3, 2, 1),
    (64, 64, 3, 1, 1),
    (64, 1, 3, 2, 1),
)


class FCDiscriminator(nn.Module):
    """Five-layer conv net scoring each spatial cell of a [0, 1] map.

    Trained to emit low scores on predictions and high scores on ground
    truth; the output grid is ceil(H/8) x ceil(W/8) of raw (pre-sigmoid)
    scores.
    """

    def __init__(self, negative_slope=0.2):
        super().__init__()
        layers = []
        for i, (c_in, c_out, k, s, p) in enumerate(LAYER_SPECS):
            layers.append(nn.Conv2d(c_in, c_out, k, stride=s, padding=p))
            if i < len(LAYER_SPECS) - 1:
                layers.append(nn.BatchNorm2d(c_out))
                layers.append(nn.LeakyReLU(negative_slope, inplace=True))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected B x 1 x H x W map, got {tuple(x.shape)}")
        if x.shape[-2] < 8 or x.shape[-1] < 8:
            raise ValueError(f"map must be at least 8x8, got {tuple(x.shape[-2:])}")
        return self.net(x)


def uncertainty_map(disc, prediction_map):
    """Per-pixel |d score / d input|, min-max normalized per image to [0, 1].

    `prediction_map` must require grad (a detached map cannot be scored);
    constant-gradient images normalize to all zeros.
    """
    if not prediction_map.requires_grad:
        raise ValueError("prediction_map is detached; call .requires_grad_() on a leaf copy first")
    with torch.enable_grad():
        score = disc(prediction_map).sum()
    (grad,) = torch.autograd.grad(score, prediction_map)
    magnitude = grad.abs()
    flat = magnitude.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1, 1)
    span = hi - lo
    normalized = torch.where(span > 0, (magnitude - lo) / span.clamp_min(1e-12), torch.zeros_like(magnitude))
    return normalized
