"""Training loss: binary cross-entropy plus soft Dice on probabilities."""

from dataclasses import dataclass

import torch

from .errors import ShapeMismatch

PROB_EPS = 1e-7
DICE_EPS = 1.0


@dataclass
class LossValue:
    bce: torch.Tensor
    dice_loss: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> dict[str, float]:
        return {
            "bce": float(self.bce),
            "dice_loss": float(self.dice_loss),
            "total": float(self.total),
        }


def _check_shapes(probs: torch.Tensor, targets: torch.Tensor) -> None:
    if probs.shape != targets.shape:
        raise ShapeMismatch(
            f"probabilities {tuple(probs.shape)} and targets {tuple(targets.shape)} differ"
        )


def bce_loss(probs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over all pixels, p clamped to [1e-7, 1 - 1e-7]."""
    _check_shapes(probs, targets)
    p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)
    y = targets.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def dice_loss(probs: torch.Tensor, targets: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - (2 sum(p y) + eps) / (sum p + sum y + eps), summed over the whole batch."""
    _check_shapes(probs, targets)
    y = targets.to(probs.dtype)
    intersection = (probs * y).sum()
    return 1.0 - (2.0 * intersection + eps) / (probs.sum() + y.sum() + eps)


def total_loss(probs: torch.Tensor, targets: torch.Tensor) -> LossValue:
    bce = bce_loss(probs, targets)
    dice = dice_loss(probs, targets)
    return LossValue(bce=bce, dice_loss=dice, total=bce + dice)
