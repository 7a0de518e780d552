"""Structure-aware segmentation losses and the adversarial objectives.

Every function here is pure: it maps tensors to a scalar loss and keeps
the autograd graph intact, so the trainer decides what gets updated.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .ops import box_filter


@dataclass
class LossWeights:
    """Trade-off weights for the composite objectives."""

    lambda1: float = 0.01
    lambda2: float = 0.01
    latent_weight: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "latent_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class EdgeWeightConfig:
    """Average-pooling window used for the edge-aware weight map."""

    pool_kernel: int = 31

    def __post_init__(self):
        if self.pool_kernel < 1 or self.pool_kernel % 2 != 1:
            raise ValueError(f"pool_kernel must be odd and positive, got {self.pool_kernel}")

    @property
    def pool_pad(self):
        return (self.pool_kernel - 1) // 2


def _check_binary(y):
    if not torch.logical_or(y == 0, y == 1).all():
        raise ValueError("ground truth mask must be binary {0, 1}")


def edge_weight(y, cfg=EdgeWeightConfig()):
    """Per-pixel weight 1 + 5*|avg_pool(y) - y|, large near mask boundaries.

    `y` is a binary mask batch (B, 1, H, W). The pooling uses stride 1 and
    replicate borders, so constant masks get a weight of exactly 1 everywhere.
    """
    _check_binary(y)
    return 1.0 + 5.0 * (box_filter(y, cfg.pool_kernel) - y).abs()


def weighted_ce(pred_logits, y, w):
    """Pixel-weighted binary cross-entropy, normalized by the weight mass.

    The per-image sum of w * bce is divided by the per-image sum of w, then
    averaged over the batch; uniformly rescaling w leaves the value unchanged.
    """
    if torch.isnan(pred_logits).any():
        raise ValueError("pred_logits contains NaN")
    bce = F.binary_cross_entropy_with_logits(pred_logits, y, reduction="none")
    return ((w * bce).sum(dim=(1, 2, 3)) / w.sum(dim=(1, 2, 3))).mean()


def boundary_iou(pred_prob, y, w, smooth=1.0):
    """Weighted IoU loss 1 - (inter + s) / (union - inter + s).

    `pred_prob` must already be probabilities in [0, 1]; `inter` and `union`
    are weighted per-image spatial sums and the result is batch-averaged.
    """
    inter = (w * pred_prob * y).sum(dim=(1, 2, 3))
    union = (w * (pred_prob + y)).sum(dim=(1, 2, 3))
    return (1.0 - (inter + smooth) / (union - inter + smooth)).mean()


def structure_loss(pred_logits, y, cfg=EdgeWeightConfig()):
    """Edge-weighted cross-entropy plus weighted boundary-IoU."""
    w = edge_weight(y, cfg)
    return weighted_ce(pred_logits, y, w) + boundary_iou(torch.sigmoid(pred_logits), y, w)


def task_structure_loss(pair, y, cfg=EdgeWeightConfig()):
    """Average of the structure losses of the initial and refined maps."""
    return 0.5 * (structure_loss(pair.init_logits, y, cfg) + structure_loss(pair.refined_logits, y, cfg))


def generator_adv_loss(conf):
    """Cross-entropy of the confidence scores against the all-ones target.

    Low when the discriminator mistakes the prediction for ground truth.
    """
    return F.binary_cross_entropy_with_logits(conf, torch.ones_like(conf))


def discriminator_loss(conf_pred, conf_gt):
    """Real/fake discrimination loss: predictions to 0, ground truth to 1."""
    return F.binary_cross_entropy_with_logits(
        conf_pred, torch.zeros_like(conf_pred)
    ) + F.binary_cross_entropy_with_logits(conf_gt, torch.ones_like(conf_gt))


def composite_objectives(str_s, adv_s, str_c, adv_c, dis_s, dis_c, weights=LossWeights()):
    """Combine the per-branch terms into (L_sod, L_cod, L_conf)."""
    l_sod = str_s + weights.lambda1 * adv_s
    l_cod = str_c + weights.lambda2 * adv_c
    l_conf = dis_s + dis_c
    return l_sod, l_cod, l_conf
