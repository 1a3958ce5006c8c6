"""Segmentation losses used by the composition branch."""

from __future__ import annotations

import torch

EPS = 1e-7


def _check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("loss input contains non-finite values")


def focal_loss(pred_probs: torch.Tensor, target: torch.Tensor, gamma: float = 2.0, mode: str = "multiclass") -> torch.Tensor:
    """Mean of ``-(1 - p_t)**gamma * log(p_t)`` over pixels.

    multiclass: ``pred_probs`` is ``(N, C, H, W)``, ``target`` holds class
    indices ``(N, H, W)``. binary: ``pred_probs`` and the boolean ``target``
    share a shape and ``pred_probs`` is the probability of the positive class.
    """
    _check_finite(pred_probs)
    if mode == "multiclass":
        p_t = pred_probs.gather(1, target.long().unsqueeze(1)).squeeze(1)
    elif mode == "binary":
        t = target.to(pred_probs.dtype)
        p_t = pred_probs * t + (1 - pred_probs) * (1 - t)
    else:
        raise ValueError(f"unknown focal mode {mode!r}")
    p_t = p_t.clamp(min=EPS, max=1.0)
    return (-((1 - p_t) ** gamma) * torch.log(p_t)).mean()


def dice_loss(pred_probs: torch.Tensor, target_onehot: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """``1 - mean_c (2 sum(p t) + s) / (sum(p) + sum(t) + s)``, sums over batch and space per class."""
    if pred_probs.shape != target_onehot.shape:
        raise ValueError(f"shape mismatch {tuple(pred_probs.shape)} vs {tuple(target_onehot.shape)}")
    _check_finite(pred_probs, target_onehot)
    t = target_onehot.to(pred_probs.dtype)
    dims = [0] + list(range(2, pred_probs.ndim))
    inter = (pred_probs * t).sum(dim=dims)
    denom = pred_probs.sum(dim=dims) + t.sum(dim=dims)
    return 1 - ((2 * inter + smooth) / (denom + smooth)).mean()


def one_hot(classes: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """``(N, H, W)`` indices to ``(N, C, H, W)`` one-hot."""
    idx = classes.long().unsqueeze(1)
    return torch.zeros(idx.shape[0], num_classes, *idx.shape[2:], dtype=dtype).scatter_(1, idx, 1.0)


def recon_loss(c_target: torch.Tensor, c_rec_logits: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    if c_target.shape != c_rec_logits.shape[:1] + c_rec_logits.shape[2:]:
        raise ValueError("target and logits disagree on batch/spatial shape")
    probs = torch.softmax(c_rec_logits, dim=1)
    return focal_loss(probs, c_target, gamma, "multiclass") + dice_loss(
        probs, one_hot(c_target, c_rec_logits.shape[1], probs.dtype)
    )


def disc_loss(gt_mask: torch.Tensor, pred_map: torch.Tensor, alpha: float = 5.0, gamma: float = 2.0) -> torch.Tensor:
    if gt_mask.shape != pred_map.shape:
        raise ValueError("gt mask and predicted map shapes differ")
    l1 = (gt_mask.to(pred_map.dtype) - pred_map).abs().mean()
    return alpha * focal_loss(pred_map, gt_mask, gamma, "binary") + l1
