"""Per-class soft Dice, per-class cross-entropy and the weighted composite.

All functions accept a single sample (C, H, W) or a batch (B, C, H, W); a
batch is treated as one large pixel set.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidInputError
from .schema import ClassWeightTable


def _batched(x, target):
    x = torch.as_tensor(x)
    target = torch.as_tensor(target)
    if x.dim() == 3:
        x, target = x.unsqueeze(0), target.unsqueeze(0)
    if x.dim() != 4 or target.shape != (x.shape[0],) + tuple(x.shape[2:]):
        raise InvalidInputError(
            f"expected scores (B, C, H, W) and target (B, H, W), got "
            f"{tuple(x.shape)} and {tuple(target.shape)}"
        )
    return x, target.long()


def _check_class(class_id, num_channels):
    if not 0 <= class_id < num_channels:
        raise InvalidInputError(f"class_id {class_id} outside [0, {num_channels})")


def dice_loss(probabilities, target, class_id: int, smoothing: float = 1.0):
    """``1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)`` for one class plane."""
    probabilities, target = _batched(probabilities, target)
    _check_class(class_id, probabilities.shape[1])
    p = probabilities[:, class_id]
    g = (target == class_id).to(p.dtype)
    inter = (p * g).sum()
    denom = p.sum() + g.sum() + smoothing
    if smoothing == 0 and denom == 0:
        return p.sum() * 0.0
    return 1.0 - (2.0 * inter + smoothing) / denom


def cross_entropy_loss(logits, target, class_id: int):
    """Mean ``-log softmax[class_id]`` over the pixels labelled ``class_id``."""
    logits, target = _batched(logits, target)
    _check_class(class_id, logits.shape[1])
    if not torch.isfinite(logits).all():
        raise InvalidInputError("logits contain non-finite values")
    sel = target == class_id
    logp = F.log_softmax(logits, dim=1)[:, class_id]
    n = sel.sum()
    if n == 0:
        return logp.sum() * 0.0
    return -(logp * sel).sum() / n


@dataclass
class LossBreakdown:
    per_class_dice: torch.Tensor
    per_class_ce: torch.Tensor
    weights: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict:
        return {
            "dice": {c: float(v) for c, v in enumerate(self.per_class_dice.detach())},
            "ce": {c: float(v) for c, v in enumerate(self.per_class_ce.detach())},
            "total": float(self.total.detach()),
        }


def weight_vector(weights: Union[ClassWeightTable, np.ndarray, torch.Tensor], num_channels: int):
    if isinstance(weights, ClassWeightTable):
        w = weights.as_vector(num_channels)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (num_channels,):
            raise ConfigurationError(
                f"{w.shape[0] if w.ndim == 1 else w.shape} weights for {num_channels} channels"
            )
    return torch.as_tensor(w)


def composite_loss(logits, target, weights, smoothing: float = 1.0) -> LossBreakdown:
    """Sum over classes of ``w_n * (0.5 * dice_n + 0.5 * ce_n)``.

    Classes absent from ``target`` contribute zero cross-entropy and, given
    positive smoothing, a Dice term driven only by predicted mass.
    """
    logits, target = _batched(logits, target)
    c = logits.shape[1]
    w = weight_vector(weights, c).to(logits.dtype)
    if not torch.isfinite(logits).all():
        raise InvalidInputError("logits contain non-finite values")

    logp = F.log_softmax(logits, dim=1)
    probs = logp.exp()
    onehot = F.one_hot(target, c).permute(0, 3, 1, 2).to(logits.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims) + smoothing
    dice = 1.0 - (2.0 * inter + smoothing) / denom
    if smoothing == 0:
        dice = torch.where(denom == 0, torch.zeros_like(dice), dice)

    n_pix = onehot.sum(dims)
    ce = -(logp * onehot).sum(dims) / n_pix.clamp(min=1)
    total = (w * (0.5 * dice + 0.5 * ce)).sum()
    return LossBreakdown(dice, ce, w, total)


class CompositeLoss(torch.nn.Module):
    def __init__(self, weights, smoothing: float = 1.0):
        super().__init__()
        self.weights = weights
        self.smoothing = smoothing

    def forward(self, logits, target) -> LossBreakdown:
        return composite_loss(logits, target, self.weights, self.smoothing)
