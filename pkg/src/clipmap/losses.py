"""Contrastive task loss, logit distillation and their weighted mix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import ContractError


@dataclass(frozen=True)
class LossWeights:
    """``total = (1 - lam) * task + lam * soft``; pure distillation by default."""

    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError(f"lambda must lie in [0, 1], got {self.lam}")


def clip_task_loss(logits_i2t, logits_t2i) -> Tensor:
    """Sum of the two directional mean cross-entropies with diagonal labels."""
    logits_i2t, logits_t2i = ops._t(logits_i2t), ops._t(logits_t2i)
    for lg in (logits_i2t, logits_t2i):
        if lg.ndim != 2 or lg.shape[0] != lg.shape[1]:
            raise ContractError(f"task loss needs square logits, got {lg.shape}")
    labels = np.eye(logits_i2t.shape[0], dtype=logits_i2t.dtype)
    return ops.cross_entropy_soft(logits_i2t, labels) + ops.cross_entropy_soft(logits_t2i, labels)


def distill_loss(student_logits: tuple, teacher_logits: tuple) -> Tensor:
    """Soft cross-entropy of each student direction against the softmaxed teacher logits."""
    total = None
    for s, t in zip(student_logits, teacher_logits):
        s = ops._t(s)
        t_data = t.data if isinstance(t, Tensor) else np.asarray(t)
        if s.shape != t_data.shape:
            raise ContractError(f"student logits {s.shape} and teacher logits {t_data.shape} differ")
        target = ops.softmax(Tensor(t_data), axis=-1).data
        term = ops.cross_entropy_soft(s, target)
        total = term if total is None else total + term
    return total


def total_loss(task, soft, weights: LossWeights) -> Tensor:
    """Weighted mix; the endpoints return the selected term itself, unchanged."""
    if weights.lam == 0.0:
        return ops._t(task)
    if weights.lam == 1.0:
        return ops._t(soft)
    return ops._t(task) * (1.0 - weights.lam) + ops._t(soft) * weights.lam


def mean_row_entropy(logits) -> float:
    """Mean Shannon entropy of softmax rows (the floor of soft cross-entropy)."""
    z = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(np.exp(logp) * logp).sum(axis=1).mean())
