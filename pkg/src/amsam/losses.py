"""Segmentation losses and the dice metric."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, log_softmax_lastdim, softmax_lastdim


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.8
    smooth: float = 1e-6
    foreground: int = 1

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.smooth <= 0.0:
            raise ValueError(f"smoothing must be positive, got {self.smooth}")


def _check_target(logits: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target.data if isinstance(target, Tensor) else target).astype(np.int64)
    if logits.ndim != 4:
        raise ShapeError(f"logits must be (b, n, h, w), got {logits.shape}")
    b, n, h, w = logits.shape
    if n < 2:
        raise ShapeError(f"need at least two classes, got {n}")
    if target.shape != (b, h, w):
        raise ShapeError(f"target {target.shape} does not match logits {logits.shape}")
    if target.min() < 0 or target.max() >= n:
        raise ValueError(f"class index outside [0, {n}) in target")
    return target


def _class_last(logits: Tensor) -> Tensor:
    return logits.transpose(0, 2, 3, 1)  # (b, h, w, n)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over batch and pixels of ``-log softmax(logits)[target]``."""
    target = _check_target(logits, target)
    n = logits.shape[1]
    logp = log_softmax_lastdim(_class_last(logits))
    onehot = np.eye(n)[target]
    return -(logp * onehot).sum() * (1.0 / target.size)


def dice_loss(logits: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """``1 - soft dice`` of the foreground probability, averaged over the batch."""
    target = _check_target(logits, target)
    b = logits.shape[0]
    p = softmax_lastdim(_class_last(logits))[..., cfg.foreground]  # (b, h, w)
    t = (target == cfg.foreground).astype(np.float64)
    inter = (p * t).sum(axis=(1, 2))
    denom = p.sum(axis=(1, 2)) + (t.sum(axis=(1, 2)) + cfg.smooth)
    dice = (inter * 2.0 + cfg.smooth) / denom
    return 1.0 - dice.sum() * (1.0 / b)


def combined_loss(logits: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    return cross_entropy(logits, target) * (1.0 - cfg.lam) + dice_loss(logits, target, cfg) * cfg.lam


def combine_losses(ce, dice, lam: float):
    return (1.0 - lam) * ce + lam * dice


def binarize(logits, foreground: int = 1) -> np.ndarray:
    """Channel argmax of ``(b, n, h, w)`` logits, as a foreground indicator."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (np.argmax(data, axis=1) == foreground).astype(np.uint8)


def dice_score(pred_mask, gt_mask) -> float:
    """``2|A and B| / (|A| + |B|)`` for binary masks; 1.0 when both are empty."""
    a = np.asarray(pred_mask.data if isinstance(pred_mask, Tensor) else pred_mask) > 0
    b = np.asarray(gt_mask.data if isinstance(gt_mask, Tensor) else gt_mask) > 0
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total
