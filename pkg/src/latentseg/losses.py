"""Training losses and binary-mask evaluation metrics."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def _check(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def mse_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check(a, b, "mse_loss")
    return ((a - b) ** 2).mean()


def dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice loss per item, averaged over the batch (if any).

    ``1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)`` with ``p = sigmoid(logits)``.
    """
    _check(logits, target, "dice_loss")
    p = torch.sigmoid(logits)
    g = target.to(p.dtype)
    dims = tuple(range(-2, 0)) if p.ndim >= 2 else (-1,)
    inter = (p * g).sum(dim=dims)
    loss = 1 - (2 * inter + smooth) / (p.sum(dim=dims) + g.sum(dim=dims) + smooth)
    return loss.mean()


def focal_loss(logits: torch.Tensor, target: torch.Tensor, alpha: float = 0.25,
               gamma: float = 2.0) -> torch.Tensor:
    """Mean over pixels of ``-alpha_t (1 - p_t)^gamma log p_t``."""
    _check(logits, target, "focal_loss")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    g = target.to(logits.dtype)
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, g, reduction="none")
    p_t = p * g + (1 - p) * (1 - g)
    alpha_t = alpha * g + (1 - alpha) * (1 - g)
    return (alpha_t * (1 - p_t) ** gamma * ce).mean()


# -- metrics ----------------------------------------------------------------

def _binary(m, what):
    a = np.asarray(m)
    if a.dtype == bool:
        return a
    vals = np.unique(a)
    if not (set(vals.tolist()) <= {0, 1} or set(vals.tolist()) <= {0, 255}):
        raise ValueError(f"{what} is not a binary mask (values {vals[:5]})")
    return a > 0


def _pair(m_p, m_g):
    p, g = _binary(m_p, "prediction"), _binary(m_g, "ground truth")
    if p.shape != g.shape:
        raise ValueError(f"mask shape mismatch {p.shape} vs {g.shape}")
    return p, g


def iou(m_p, m_g) -> float:
    p, g = _pair(m_p, m_g)
    union = np.logical_or(p, g).sum()
    return 1.0 if union == 0 else float(np.logical_and(p, g).sum() / union)


def dice_coef(m_p, m_g) -> float:
    p, g = _pair(m_p, m_g)
    total = p.sum() + g.sum()
    return 1.0 if total == 0 else float(2 * np.logical_and(p, g).sum() / total)


def pixel_acc(m_p, m_g) -> float:
    p, g = _pair(m_p, m_g)
    return float((p == g).mean())
