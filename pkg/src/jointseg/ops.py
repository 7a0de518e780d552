"""Small tensor helpers shared by the loss and decoder code."""

import math

import torch
import torch.nn.functional as F


def replicate_pad2d(x, pad):
    """Replicate-pad the last two dims by `pad` on every side.

    Unlike ``F.pad(mode="replicate")`` this works for pads that are
    larger than the spatial size (needed for 31x31 pooling windows on
    tiny inputs): border values are simply repeated via clamped indexing.
    """
    if pad == 0:
        return x
    h, w = x.shape[-2], x.shape[-1]
    rows = torch.arange(-pad, h + pad, device=x.device).clamp_(0, h - 1)
    cols = torch.arange(-pad, w + pad, device=x.device).clamp_(0, w - 1)
    return x.index_select(-2, rows).index_select(-1, cols)


def box_filter(x, kernel):
    """Stride-1 average pooling with replicate borders; keeps the input shape."""
    if kernel % 2 != 1:
        raise ValueError(f"box_filter kernel must be odd, got {kernel}")
    pad = (kernel - 1) // 2
    return F.avg_pool2d(replicate_pad2d(x, pad), kernel, stride=1, padding=0)


def gaussian_kernel2d(kernel, sigma, dtype=torch.float32):
    """Normalized 2-D Gaussian, shape (1, 1, kernel, kernel)."""
    half = (kernel - 1) / 2.0
    coords = torch.arange(kernel, dtype=dtype) - half
    g = torch.exp(-coords.square() / (2.0 * sigma * sigma))
    k2d = torch.outer(g, g)
    k2d = k2d / k2d.sum()
    return k2d.view(1, 1, kernel, kernel)


def gaussian_filter(x, weight):
    """Depthwise Gaussian blur with replicate borders for a 1-channel map.

    `weight` is a (1, 1, k, k) kernel summing to one, so a constant map
    stays constant (including at the borders).
    """
    k = weight.shape[-1]
    pad = (k - 1) // 2
    return F.conv2d(replicate_pad2d(x, pad), weight.to(x.dtype))


def upsample_to(x, size):
    """Bilinear resize (no corner alignment) to a (H, W) target."""
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def conv_out_size(size, kernel, stride, pad):
    """Spatial size produced by a single conv layer."""
    return math.floor((size + 2 * pad - kernel) / stride) + 1
