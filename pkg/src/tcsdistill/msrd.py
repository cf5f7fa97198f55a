"""Masked semantic response distillation."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import diffcore as dc
from .diffcore import ShapeError, Tensor


def build_mask(gt_sem: np.ndarray, dilation: int = 0) -> np.ndarray:
    """Per-class foreground mask; optionally dilated by ``dilation`` cells."""
    gt = np.asarray(gt_sem.data if isinstance(gt_sem, Tensor) else gt_sem)
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground-truth raster must be binary")
    mask = gt == 1
    if dilation > 0:
        struct = np.zeros((1, 1, 2 * dilation + 1, 2 * dilation + 1), bool)
        struct[0, 0] = ndimage.generate_binary_structure(2, 1)
        mask = ndimage.binary_dilation(mask, structure=struct, iterations=dilation)
    return mask


def _probs(logits) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def msrd_loss(student_logits: Tensor, teacher_logits, coach_logits, mask: np.ndarray,
              gamma1: float = 0.7, gamma2: float = 0.3) -> Tensor:
    """gamma1 * BCE(student, sigmoid(teacher)) + gamma2 * BCE(student, sigmoid(coach)).

    Only masked cells take part, each BCE is mean-reduced over them, and the
    reference probabilities are constants.  ``coach_logits=None`` drops the
    coach term; an empty mask gives an exact zero with zero gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    for name, t in (("teacher", teacher_logits), ("coach", coach_logits)):
        if t is not None and tuple(np.shape(t.data if isinstance(t, Tensor) else t)) != student_logits.shape:
            raise ShapeError("msrd_loss", student_logits.shape, np.shape(getattr(t, "data", t)), name)
    if mask.shape != student_logits.shape:
        raise ShapeError("msrd_loss", student_logits.shape, mask.shape, "mask")
    if not mask.any():
        return dc.sum(student_logits) * 0.0
    s = dc.masked_select(student_logits, mask)
    t_logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    loss = dc.mean(dc.bce_with_logits(s, _probs(t_logits[mask]))) * gamma1
    if coach_logits is not None:
        c_logits = coach_logits.data if isinstance(coach_logits, Tensor) else np.asarray(coach_logits)
        loss = loss + dc.mean(dc.bce_with_logits(s, _probs(c_logits[mask]))) * gamma2
    return loss
