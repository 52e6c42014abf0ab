"""Dice, focal, and embedding-distillation losses.

All losses take float logits (or embeddings) as autodiff tensors and a
plain numpy target, and return a scalar tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_FLOOR = 1e-12
IOU_FLOOR = 1e-12


@dataclass
class LossConfig:
    dice_smooth: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    dice_weight: float = 1.0
    focal_weight: float = 1.0
    distill_weight: float = 1.0

    def validate(self):
        if min(self.dice_weight, self.focal_weight, self.distill_weight,
               self.focal_alpha) < 0 or self.focal_gamma < 0:
            raise ValueError("loss weights and gamma must be non-negative")
        return self


def dice_loss(logits: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - (2*sum(p*t) + smooth) / (sum(p) + sum(t) + smooth), p = sigmoid."""
    t = np.asarray(target, dtype=np.float32)
    p = T.sigmoid(logits)
    inter = T.tsum(T.mul(p, t))
    denom = T.add(T.tsum(p), float(t.sum()) + smooth)
    return T.sub(1.0, T.div(T.add(T.mul(inter, 2.0), smooth), denom))


def focal_loss(logits: Tensor, target: np.ndarray, gamma: float = 2.0,
               alpha: float = 1.0) -> Tensor:
    """Mean of -alpha * (1 - p_t)^gamma * log(p_t), log clamped at 1e-12."""
    t = np.asarray(target, dtype=np.float32)
    p = T.sigmoid(logits)
    pt = T.add(T.mul(p, t), T.mul(T.sub(1.0, p), 1.0 - t))
    logpt = T.log(T.maximum(pt, LOG_FLOOR))
    focal = T.mul(T.mul(power_term(pt, gamma), logpt), -alpha)
    return T.tmean(focal)


def power_term(pt: Tensor, gamma: float) -> Tensor:
    if gamma == 0.0:
        return Tensor(np.ones_like(pt.data))
    return T.power(T.sub(1.0, pt), gamma)


def distill_loss(student: Tensor, teacher: np.ndarray) -> Tensor:
    """MSE times soft magnitude-IoU between student and teacher embeddings.

    Embeddings are signed, so the IoU is taken over elementwise magnitudes:
    sum(min(|s|,|t|)) / sum(max(|s|,|t|)), denominator floored at 1e-12.
    When the supports are disjoint the IoU (and hence the loss) is zero;
    that is a documented consequence of the formula.
    """
    t = np.asarray(teacher, dtype=np.float32)
    diff = T.sub(student, t)
    mse = T.tmean(T.mul(diff, diff))
    sa = T.absolute(student)
    ta = np.abs(t)
    iou = T.div(T.tsum(T.minimum(sa, ta)),
                T.maximum(T.tsum(T.maximum(sa, ta)), IOU_FLOOR))
    return T.mul(mse, iou)


def compound_loss(logits: Tensor, target: np.ndarray, cfg: LossConfig,
                  student_emb: Tensor | None = None,
                  teacher_emb: np.ndarray | None = None) -> Tensor:
    """dice_weight*dice + focal_weight*focal (+ distill_weight*distill)."""
    loss = T.add(
        T.mul(dice_loss(logits, target, cfg.dice_smooth), cfg.dice_weight),
        T.mul(focal_loss(logits, target, cfg.focal_gamma, cfg.focal_alpha),
              cfg.focal_weight))
    if student_emb is not None and teacher_emb is not None:
        loss = T.add(loss, T.mul(distill_loss(student_emb, teacher_emb),
                                 cfg.distill_weight))
    return loss
