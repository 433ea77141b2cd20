"""Training objectives and segmentation metrics.

All losses reduce by mean so the reconstruction/adversarial weights do not
depend on batch size. Log-sigmoid forms keep every loss finite for finite
logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeMismatch

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 0.99
    lambda_adv: float = 0.01

    def __post_init__(self):
        if self.lambda_rec < 0 or self.lambda_adv < 0:
            raise ValueError("loss weights must be non-negative")


def _same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def rec_loss(pred_patch: torch.Tensor, target_patch: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the inpainted region."""
    _same_shape(pred_patch, target_patch)
    return ((pred_patch - target_patch) ** 2).mean()


def adv_loss_d(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Discriminator loss: ``-mean log sig(real) - mean log(1 - sig(fake))``."""
    if real_logits.shape[0] != fake_logits.shape[0]:
        raise ShapeMismatch("real and fake batches differ in length")
    return -F.logsigmoid(real_logits).mean() - F.logsigmoid(-fake_logits).mean()


def adv_loss_g(fake_logits: torch.Tensor) -> torch.Tensor:
    # non-saturating generator objective
    return -F.logsigmoid(fake_logits).mean()


def joint_loss(l_rec, l_adv, w: LossWeights = LossWeights()):
    return w.lambda_rec * l_rec + w.lambda_adv * l_adv


def weighted_bce(logits: torch.Tensor, targets: torch.Tensor, pos_weight: float = 2.0) -> torch.Tensor:
    """Binary cross-entropy with positive terms scaled by ``pos_weight``."""
    if pos_weight <= 0:
        raise ValueError("pos_weight must be positive")
    _same_shape(logits, targets)
    t = targets.to(logits.dtype)
    loss = -(pos_weight * t * F.logsigmoid(logits) + (1 - t) * F.logsigmoid(-logits))
    return loss.mean()


def soft_dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """``1 - mean soft dice`` over channels (and over samples for batched input).

    ``pred`` holds probabilities shaped ``(c, H, W)`` or ``(n, c, H, W)``.
    """
    _same_shape(pred, target)
    t = target.to(pred.dtype)
    inter = (pred * t).sum(dim=(-2, -1))
    denom = pred.sum(dim=(-2, -1)) + t.sum(dim=(-2, -1))
    dice = (2 * inter + eps) / (denom + eps)
    return 1 - dice.mean()


def dice_per_channel(pred_binary: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Hard dice for each leading index; empty prediction and empty target score 1."""
    _same_shape(pred_binary, target)
    p = pred_binary.to(torch.float64)
    t = target.to(torch.float64)
    inter = (p * t).sum(dim=(-2, -1))
    denom = p.sum(dim=(-2, -1)) + t.sum(dim=(-2, -1))
    return torch.where(denom == 0, torch.ones_like(denom), 2 * inter / denom.clamp_min(1))


def dice_score(pred_binary: torch.Tensor, target: torch.Tensor) -> float:
    """Mean per-channel hard dice for one ``(c, H, W)`` prediction."""
    return float(dice_per_channel(pred_binary, target).mean())
