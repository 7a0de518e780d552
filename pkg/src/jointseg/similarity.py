"""Latent embedding of feature pyramids and the cosine contradiction loss."""

import torch
import torch.nn as nn

from .encoders import PYRAMID_CHANNELS, check_pyramid

POOLED_DIM = sum(PYRAMID_CHANNELS)  # 3840


def pool_pyramid(pyramid):
    """Average each level over space and concatenate: B x 3840."""
    check_pyramid(pyramid)
    return torch.cat([f.mean(dim=(2, 3)) for f in pyramid], dim=1)


class SimilarityHead(nn.Module):
    """One shared fully connected map from pooled features to K-dim codes.

    Both task views of a connection image go through this same layer, so a
    single instance must serve the saliency and camouflage pyramids.
    """

    def __init__(self, latent_dim=700, bias=True):
        super().__init__()
        self.latent_dim = latent_dim
        self.project = nn.Linear(POOLED_DIM, latent_dim, bias=bias)

    def forward(self, pyramid):
        return self.project(pool_pyramid(pyramid))


def latent_cosine(code_s, code_c, eps=1e-8):
    """Batch-averaged cosine between the two code sets, in [-1, 1].

    Returns (loss, degenerate); `degenerate` flags a near-zero-norm code,
    in which case its cosine contribution is 0 by the epsilon guard.
    """
    if code_s.shape != code_c.shape:
        raise ValueError(f"code shapes differ: {tuple(code_s.shape)} vs {tuple(code_c.shape)}")
    norm_s = code_s.norm(dim=-1)
    norm_c = code_c.norm(dim=-1)
    degenerate = bool((norm_s < eps).any() or (norm_c < eps).any())
    cos = (code_s * code_c).sum(dim=-1) / (norm_s * norm_c).clamp_min(eps)
    return cos.mean(), degenerate
